#include "bat/loss.hpp"

#include <cmath>
#include <stdexcept>

namespace bat::loss {

namespace {
constexpr double kDiceEps = 1.0;
constexpr double kCeClamp = 1e-7;

double clamp_prob(double m) {
  if (m < kCeClamp) return kCeClamp;
  if (m > 1.0 - kCeClamp) return 1.0 - kCeClamp;
  return m;
}
}  // namespace

double dice_loss(const Tensor& gt, const Tensor& pred) {
  gt.require_shape(pred, "dice_loss");
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    inter += pred.v[i] * gt.v[i];
    sp += pred.v[i];
    sg += gt.v[i];
  }
  return 1.0 - (2.0 * inter + kDiceEps) / (sp + sg + kDiceEps);
}

Tensor dice_loss_grad(const Tensor& gt, const Tensor& pred) {
  gt.require_shape(pred, "dice_loss_grad");
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    inter += pred.v[i] * gt.v[i];
    sp += pred.v[i];
    sg += gt.v[i];
  }
  const double num = 2.0 * inter + kDiceEps;
  const double den = sp + sg + kDiceEps;
  Tensor grad = Tensor::zeros_like(pred);
  for (std::size_t i = 0; i < gt.size(); ++i)
    grad.v[i] = -(2.0 * gt.v[i] * den - num) / (den * den);
  return grad;
}

double map_ce_loss(const keypatch::KeyPatchMap& gt, const Tensor& pred) {
  if (gt.length() != pred.size()) throw std::invalid_argument("map_ce_loss: length mismatch");
  const std::size_t n = pred.size();
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double m = clamp_prob(pred.v[i]);
    const double g = gt.values[i];
    sum += -(g * std::log(m) + (1.0 - g) * std::log(1.0 - m));
  }
  return sum / static_cast<double>(n);
}

Tensor map_ce_grad(const keypatch::KeyPatchMap& gt, const Tensor& pred) {
  if (gt.length() != pred.size()) throw std::invalid_argument("map_ce_grad: length mismatch");
  const std::size_t n = pred.size();
  Tensor grad = Tensor::zeros_like(pred);
  for (std::size_t i = 0; i < n; ++i) {
    const double m = pred.v[i];
    if (m < kCeClamp || m > 1.0 - kCeClamp) continue;  // clamp region is flat
    const double g = gt.values[i];
    grad.v[i] = (-g / m + (1.0 - g) / (1.0 - m)) / static_cast<double>(n);
  }
  return grad;
}

LossBreakdown total_loss(const Tensor& seg_gt, const Tensor& seg_pred,
                         const keypatch::KeyPatchMap& map_gt, const std::vector<Tensor>& map_preds,
                         std::size_t expected_maps) {
  if (map_preds.size() != expected_maps)
    throw std::invalid_argument("total_loss: expected " + std::to_string(expected_maps) + " map predictions, got " +
                                std::to_string(map_preds.size()));
  LossBreakdown out;
  out.seg_loss = dice_loss(seg_gt, seg_pred);
  out.map_losses.reserve(map_preds.size());
  out.total = out.seg_loss;
  for (const auto& m : map_preds) {
    out.map_losses.push_back(map_ce_loss(map_gt, m));
    out.total += out.map_losses.back();
  }
  return out;
}

}  // namespace bat::loss
