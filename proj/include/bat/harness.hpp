#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "bat/data.hpp"
#include "bat/keypatch.hpp"
#include "bat/loss.hpp"
#include "bat/model.hpp"

namespace bat::harness {

struct TrainConfig {
  double lr = 0.001;
  int batch = 4;
  int max_epochs = 200;
  int plateau_patience = 10;
  double lr_decay = 0.5;
  std::uint64_t seed = 0;
  bool augment = false;
  keypatch::GeneratorConfig keypatch;

  void validate() const;
};

// Thresholded overlap metrics; empty prediction vs empty ground truth is
// defined as (1, 1).
std::pair<double, double> metrics(const BinaryMask& gt, const Tensor& pred, double threshold);

struct SampleEval {
  std::string id;
  double dice = 0.0;
  double iou = 0.0;
};

struct EvalReport {
  double threshold = 0.5;
  std::vector<SampleEval> per_sample;
  double mean_dice = 0.0;
  double mean_iou = 0.0;
};

EvalReport evaluate(const std::vector<data::Sample>& samples, const model::ParameterSet& params,
                    const model::ModelConfig& cfg, double threshold = 0.5);
std::string eval_report_to_json(const EvalReport& report);

struct AdamState {
  std::vector<Tensor> m, v;  // first/second moments, declared parameter order
  long step = 0;
};

AdamState make_adam_state(const model::ParameterSet& params);
// Standard bias-corrected Adam (beta1 0.9, beta2 0.999, eps 1e-8). Throws on
// a non-finite gradient, naming the parameter.
void adam_step(model::ParameterSet& params, const model::ParameterSet& grads, AdamState& state, double lr);

// Halves (by `decay`) the learning rate when the observed loss has not
// improved for `patience` consecutive observations.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double decay, int patience) : lr_(lr), decay_(decay), patience_(patience) {}
  double lr() const { return lr_; }
  bool observe(double val_loss) {
    if (val_loss < best_) {
      best_ = val_loss;
      bad_ = 0;
      return false;
    }
    if (++bad_ >= patience_) {
      lr_ *= decay_;
      bad_ = 0;
      return true;
    }
    return false;
  }

 private:
  double lr_, decay_;
  int patience_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_ = 0;
};

struct TrainResult {
  model::ParameterSet best_params;
  model::ModelConfig model_cfg;
  double best_val_loss = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  std::vector<std::string> log_lines;  // one JSON object per optimizer step
  std::vector<double> lr_by_epoch;
};

// Shuffled mini-batch training with Adam and the validation-plateau schedule;
// keeps the parameters of the best validation epoch. Key-patch targets come
// from each sample's mask (regenerated after augmentation). Deterministic for
// a fixed seed and config.
TrainResult train(const std::vector<data::Sample>& train_set, const std::vector<data::Sample>& val_set,
                  const model::ModelConfig& mcfg, const TrainConfig& tcfg);

struct GradCheckEntry {
  std::string group;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  std::vector<std::string> groups_covered;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

struct GradCheckOptions {
  std::uint64_t seed = 1;
  double step = 1e-5;  // central-difference half step
  // test hook: applied to the analytic gradients before comparison
  std::function<void(model::ParameterSet&)> mutate_grads;
};

// Central-difference verification of backward() on a fixed random synthetic
// batch, sampling parameters round-robin across every parameter tensor.
GradCheckReport gradcheck(const model::ModelConfig& cfg, int n_params, double tolerance,
                          const GradCheckOptions& opts = {});
std::string gradcheck_report_to_json(const GradCheckReport& report);

}  // namespace bat::harness
