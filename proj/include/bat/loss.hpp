#pragma once

#include <vector>

#include "bat/keypatch.hpp"
#include "bat/tensor.hpp"

namespace bat::loss {

struct LossBreakdown {
  double seg_loss = 0.0;
  std::vector<double> map_losses;
  double total = 0.0;  // seg_loss + map losses summed left to right
};

// Smoothed Dice loss 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps), eps = 1.
double dice_loss(const Tensor& gt, const Tensor& pred);
// d(dice_loss)/d(pred)
Tensor dice_loss_grad(const Tensor& gt, const Tensor& pred);

// Mean binary cross entropy over the L patches; predictions clamped to
// [1e-7, 1 - 1e-7] before the logs.
double map_ce_loss(const keypatch::KeyPatchMap& gt, const Tensor& pred);
Tensor map_ce_grad(const keypatch::KeyPatchMap& gt, const Tensor& pred);

// Hybrid objective: seg loss plus one cross-entropy term per predicted map,
// every map supervised by the same ground truth. Requires exactly
// expected_maps predictions (n + 1 for an n-layer encoder).
LossBreakdown total_loss(const Tensor& seg_gt, const Tensor& seg_pred,
                         const keypatch::KeyPatchMap& map_gt, const std::vector<Tensor>& map_preds,
                         std::size_t expected_maps);

}  // namespace bat::loss
