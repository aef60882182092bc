#include "bat/harness.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace bat::harness {

namespace {

std::vector<std::pair<std::string, Tensor*>> tensor_list(model::ParameterSet& p) {
  std::vector<std::pair<std::string, Tensor*>> out;
  p.for_each([&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
  return out;
}

Tensor mask_to_tensor(const BinaryMask& mask) {
  Tensor t{static_cast<std::size_t>(mask.height), static_cast<std::size_t>(mask.width)};
  for (std::size_t i = 0; i < mask.v.size(); ++i) t.v[i] = mask.v[i];
  return t;
}

}  // namespace

void TrainConfig::validate() const {
  if (lr <= 0.0) throw std::invalid_argument("lr must be positive");
  if (lr_decay <= 0.0 || lr_decay >= 1.0) throw std::invalid_argument("lr_decay must be in (0,1)");
  if (batch < 1) throw std::invalid_argument("batch must be >= 1");
  if (max_epochs < 0) throw std::invalid_argument("max_epochs must be >= 0");
  if (plateau_patience < 1) throw std::invalid_argument("plateau_patience must be >= 1");
}

std::pair<double, double> metrics(const BinaryMask& gt, const Tensor& pred, double threshold) {
  if (pred.dims.size() != 2 || static_cast<int>(pred.dim(0)) != gt.height || static_cast<int>(pred.dim(1)) != gt.width)
    throw std::invalid_argument("metrics: prediction shape does not match mask");
  long inter = 0, np = 0, ng = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.v[i] >= threshold;
    const bool g = gt.v[i] != 0;
    inter += p && g;
    np += p;
    ng += g;
  }
  if (np + ng == 0) return {1.0, 1.0};
  const double dice = 2.0 * inter / static_cast<double>(np + ng);
  const double iou = static_cast<double>(inter) / static_cast<double>(np + ng - inter);
  return {dice, iou};
}

EvalReport evaluate(const std::vector<data::Sample>& samples, const model::ParameterSet& params,
                    const model::ModelConfig& cfg, double threshold) {
  EvalReport report;
  report.threshold = threshold;
  double sd = 0.0, si = 0.0;
  for (const auto& s : samples) {
    auto res = model::forward(s.image, params, cfg);
    auto [dice, iou] = metrics(s.mask, res.seg, threshold);
    report.per_sample.push_back({s.id, dice, iou});
    sd += dice;
    si += iou;
  }
  if (!samples.empty()) {
    report.mean_dice = sd / static_cast<double>(samples.size());
    report.mean_iou = si / static_cast<double>(samples.size());
  }
  return report;
}

std::string eval_report_to_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["threshold"] = report.threshold;
  j["mean_dice"] = report.mean_dice;
  j["mean_iou"] = report.mean_iou;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& s : report.per_sample) arr.push_back({{"id", s.id}, {"dice", s.dice}, {"iou", s.iou}});
  j["samples"] = std::move(arr);
  return j.dump(2);
}

AdamState make_adam_state(const model::ParameterSet& params) {
  AdamState st;
  params.for_each([&](const std::string&, const Tensor& t) {
    st.m.push_back(Tensor::zeros_like(t));
    st.v.push_back(Tensor::zeros_like(t));
  });
  return st;
}

void adam_step(model::ParameterSet& params, const model::ParameterSet& grads, AdamState& state, double lr) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  auto ps = tensor_list(params);
  auto gs = tensor_list(const_cast<model::ParameterSet&>(grads));
  if (ps.size() != gs.size() || ps.size() != state.m.size())
    throw std::invalid_argument("adam_step: parameter/gradient/state layout mismatch");
  ++state.step;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t t = 0; t < ps.size(); ++t) {
    Tensor& p = *ps[t].second;
    const Tensor& g = *gs[t].second;
    if (!p.same_shape(g)) throw std::invalid_argument("adam_step: shape mismatch at " + ps[t].first);
    Tensor& m = state.m[t];
    Tensor& v = state.v[t];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g.v[i];
      if (!std::isfinite(gi))
        throw std::runtime_error("non-finite gradient in parameter '" + ps[t].first + "'");
      m.v[i] = b1 * m.v[i] + (1.0 - b1) * gi;
      v.v[i] = b2 * v.v[i] + (1.0 - b2) * gi * gi;
      const double mhat = m.v[i] / c1;
      const double vhat = v.v[i] / c2;
      p.v[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

namespace {

struct Targets {
  Tensor seg_gt;
  keypatch::KeyPatchMap map_gt;
};

Targets make_targets(const data::Sample& s, const keypatch::GeneratorConfig& kcfg) {
  return {mask_to_tensor(s.mask), keypatch::generate_keypatch_map(s.mask, kcfg)};
}

// Per-sample loss gradient contributions scaled by `weight` (1/batch for the
// batch mean), accumulated into grads. Returns the unweighted breakdown.
loss::LossBreakdown sample_pass(const data::Sample& s, const Targets& tg, const model::ParameterSet& params,
                                const model::ModelConfig& mcfg, double weight, model::ParameterSet& grads) {
  model::ForwardTrace trace;
  auto res = model::forward(s.image, params, mcfg, trace);
  const std::size_t expected = mcfg.bag ? static_cast<std::size_t>(mcfg.layers) + 1 : 0;
  auto breakdown = loss::total_loss(tg.seg_gt, res.seg, tg.map_gt, res.maps, expected);

  Tensor d_seg = loss::dice_loss_grad(tg.seg_gt, res.seg);
  for (double& x : d_seg.v) x *= weight;
  std::vector<Tensor> d_maps;
  for (const auto& m : res.maps) {
    Tensor g = loss::map_ce_grad(tg.map_gt, m);
    for (double& x : g.v) x *= weight;
    d_maps.push_back(std::move(g));
  }
  model::backward(trace, params, mcfg, d_seg, d_maps, grads);
  return breakdown;
}

double val_seg_loss(const std::vector<data::Sample>& val, const std::vector<Targets>& targets,
                    const model::ParameterSet& params, const model::ModelConfig& mcfg) {
  double sum = 0.0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    auto res = model::forward(val[i].image, params, mcfg);
    sum += loss::dice_loss(targets[i].seg_gt, res.seg);
  }
  return sum / static_cast<double>(val.size());
}

}  // namespace

TrainResult train(const std::vector<data::Sample>& train_set, const std::vector<data::Sample>& val_set,
                  const model::ModelConfig& mcfg, const TrainConfig& tcfg) {
  mcfg.validate();
  tcfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  if (val_set.empty()) throw std::invalid_argument("train: empty validation set");

  TrainResult result;
  result.model_cfg = mcfg;
  model::ParameterSet params = model::init_params(mcfg, tcfg.seed);
  AdamState adam = make_adam_state(params);
  PlateauScheduler sched(tcfg.lr, tcfg.lr_decay, tcfg.plateau_patience);
  Rng rng(tcfg.seed ^ 0x5DEECE66Dull);

  std::vector<Targets> train_targets, val_targets;
  for (const auto& s : train_set) train_targets.push_back(make_targets(s, tcfg.keypatch));
  for (const auto& s : val_set) val_targets.push_back(make_targets(s, tcfg.keypatch));

  result.best_params = params;
  result.best_val_loss = std::numeric_limits<double>::infinity();
  result.best_epoch = 0;

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  long step = 0;
  for (int epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(tcfg.batch)) {
      const std::size_t bn = std::min(static_cast<std::size_t>(tcfg.batch), order.size() - pos);
      model::ParameterSet grads = model::zero_params(mcfg);
      double seg_sum = 0.0, total_sum = 0.0;
      std::vector<double> map_sums(mcfg.bag ? static_cast<std::size_t>(mcfg.layers) + 1 : 0, 0.0);
      for (std::size_t b = 0; b < bn; ++b) {
        const std::size_t idx = order[pos + b];
        loss::LossBreakdown breakdown;
        if (tcfg.augment) {
          const bool vf = rng.uniform() < 0.5;
          const bool hf = rng.uniform() < 0.5;
          const double sc = rng.uniform(0.9, 1.1);
          data::Sample aug = data::augment_sample(train_set[idx], vf, hf, sc);
          Targets tg = make_targets(aug, tcfg.keypatch);
          breakdown = sample_pass(aug, tg, params, mcfg, 1.0 / static_cast<double>(bn), grads);
        } else {
          breakdown = sample_pass(train_set[idx], train_targets[idx], params, mcfg,
                                  1.0 / static_cast<double>(bn), grads);
        }
        seg_sum += breakdown.seg_loss;
        total_sum += breakdown.total;
        for (std::size_t i = 0; i < map_sums.size(); ++i) map_sums[i] += breakdown.map_losses[i];
      }
      adam_step(params, grads, adam, sched.lr());
      ++step;

      nlohmann::ordered_json line;
      line["step"] = step;
      line["epoch"] = epoch;
      line["lr"] = sched.lr();
      line["seg_loss"] = seg_sum / static_cast<double>(bn);
      auto maps = nlohmann::ordered_json::array();
      for (double m : map_sums) maps.push_back(m / static_cast<double>(bn));
      line["map_losses"] = std::move(maps);
      line["total"] = total_sum / static_cast<double>(bn);
      result.log_lines.push_back(line.dump());
    }

    const double vloss = val_seg_loss(val_set, val_targets, params, mcfg);
    if (vloss < result.best_val_loss) {
      result.best_val_loss = vloss;
      result.best_params = params;
      result.best_epoch = epoch;
    }
    sched.observe(vloss);
    result.lr_by_epoch.push_back(sched.lr());
  }
  return result;
}

GradCheckReport gradcheck(const model::ModelConfig& cfg, int n_params, double tolerance,
                          const GradCheckOptions& opts) {
  if (n_params < 1) throw std::invalid_argument("gradcheck: n_params must be >= 1");
  cfg.validate();
  GradCheckReport report;
  report.tolerance = tolerance;

  data::SyntheticSpec dspec;
  dspec.seed = opts.seed;
  dspec.count = 2;
  dspec.image_side = cfg.image_side;
  dspec.contrast = data::Contrast::medium;
  dspec.hair_density = 1;
  dspec.boundary_roughness = 0.3;
  const auto batch = data::generate_samples(dspec);

  keypatch::GeneratorConfig kcfg;
  std::vector<Tensor> seg_gts;
  std::vector<keypatch::KeyPatchMap> map_gts;
  for (const auto& s : batch) {
    seg_gts.push_back(mask_to_tensor(s.mask));
    map_gts.push_back(keypatch::generate_keypatch_map(s.mask, kcfg));
  }

  model::ParameterSet params = model::init_params(cfg, opts.seed + 17);
  const double weight = 1.0 / static_cast<double>(batch.size());
  const std::size_t expected = cfg.bag ? static_cast<std::size_t>(cfg.layers) + 1 : 0;

  auto batch_loss = [&]() {
    double sum = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      auto res = model::forward(batch[i].image, params, cfg);
      sum += loss::total_loss(seg_gts[i], res.seg, map_gts[i], res.maps, expected).total;
    }
    return sum * weight;
  };

  model::ParameterSet grads = model::zero_params(cfg);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    model::ForwardTrace trace;
    auto res = model::forward(batch[i].image, params, cfg, trace);
    Tensor d_seg = loss::dice_loss_grad(seg_gts[i], res.seg);
    for (double& x : d_seg.v) x *= weight;
    std::vector<Tensor> d_maps;
    for (const auto& m : res.maps) {
      Tensor g = loss::map_ce_grad(map_gts[i], m);
      for (double& x : g.v) x *= weight;
      d_maps.push_back(std::move(g));
    }
    model::backward(trace, params, cfg, d_seg, d_maps, grads);
  }
  if (opts.mutate_grads) opts.mutate_grads(grads);

  auto plist = tensor_list(params);
  auto glist = tensor_list(grads);
  std::vector<std::size_t> groups;
  for (std::size_t t = 0; t < plist.size(); ++t)
    if (plist[t].second->size() > 0) groups.push_back(t);

  Rng rng(opts.seed + 99);
  for (int k = 0; k < n_params; ++k) {
    const std::size_t t = groups[static_cast<std::size_t>(k) % groups.size()];
    Tensor& p = *plist[t].second;
    const std::size_t idx = static_cast<std::size_t>(rng.uniform_int(p.size()));

    const double saved = p.v[idx];
    p.v[idx] = saved + opts.step;
    const double lp = batch_loss();
    p.v[idx] = saved - opts.step;
    const double lm = batch_loss();
    p.v[idx] = saved;

    const double numeric = (lp - lm) / (2.0 * opts.step);
    const double analytic = glist[t].second->v[idx];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
    const double rel = std::abs(analytic - numeric) / denom;
    report.entries.push_back({plist[t].first, idx, analytic, numeric, rel});
    if (rel > report.max_rel_err) report.max_rel_err = rel;
    if (std::find(report.groups_covered.begin(), report.groups_covered.end(), plist[t].first) ==
        report.groups_covered.end())
      report.groups_covered.push_back(plist[t].first);
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

std::string gradcheck_report_to_json(const GradCheckReport& report) {
  nlohmann::ordered_json j;
  j["pass"] = report.pass;
  j["tolerance"] = report.tolerance;
  j["max_rel_err"] = report.max_rel_err;
  j["params_checked"] = report.entries.size();
  j["groups_covered"] = report.groups_covered;
  auto worst = nlohmann::ordered_json::array();
  std::vector<GradCheckEntry> sorted = report.entries;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.rel_err > b.rel_err; });
  for (std::size_t i = 0; i < sorted.size() && i < 5; ++i)
    worst.push_back({{"group", sorted[i].group},
                     {"index", sorted[i].index},
                     {"analytic", sorted[i].analytic},
                     {"numeric", sorted[i].numeric},
                     {"rel_err", sorted[i].rel_err}});
  j["worst"] = std::move(worst);
  return j.dump(2);
}

}  // namespace bat::harness
