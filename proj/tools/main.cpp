#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "bat/data.hpp"
#include "bat/harness.hpp"
#include "bat/image.hpp"
#include "bat/keypatch.hpp"
#include "bat/loss.hpp"
#include "bat/model.hpp"

namespace fs = std::filesystem;

namespace {

// exit code 2: bad flags, unknown keys, malformed config
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Plain key=value lines ('#' comments). Keys are the long option names of
// `cmd`; values apply only where the command line did not set the option.
void apply_config_file(CLI::App* cmd, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file '" + path + "'");
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError("malformed config line " + std::to_string(lineno) + " in '" + path + "' (expected key=value)");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw UsageError("empty key on config line " + std::to_string(lineno) + " in '" + path + "'");
    CLI::Option* opt = cmd->get_option_no_throw("--" + key);
    if (opt == nullptr) throw UsageError("unknown config key '" + key + "' in '" + path + "'");
    if (opt->count() > 0) continue;  // command-line flags win
    opt->add_result(value);
    opt->run_callback();
  }
}

void add_model_opts(CLI::App* cmd, bat::model::ModelConfig& mcfg) {
  cmd->add_option("--size", mcfg.image_side, "image side in pixels (multiple of 16)");
  cmd->add_option("--channels", mcfg.channels, "embedding channels C");
  cmd->add_option("--layers", mcfg.layers, "encoder layers n");
  cmd->add_option("--heads", mcfg.heads, "attention heads");
  cmd->add_option("--mlp", mcfg.mlp_hidden, "MLP hidden width");
  cmd->add_flag("--no-bag{false}", mcfg.bag, "disable the boundary attention gates");
}

int run(int argc, char** argv) {
  CLI::App app{"boundary-aware transformer for lesion segmentation"};
  app.require_subcommand(1);

  // gen-data
  bat::data::SyntheticSpec dspec;
  std::string contrast = "medium";
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic lesion dataset");
  gen->add_option("--seed", dspec.seed, "dataset seed");
  gen->add_option("--count", dspec.count, "number of samples")->check(CLI::PositiveNumber);
  gen->add_option("--size", dspec.image_side, "image side in pixels");
  gen->add_option("--contrast", contrast, "lesion contrast: low|medium|high");
  gen->add_option("--hair", dspec.hair_density, "hair arcs per image")->check(CLI::NonNegativeNumber);
  gen->add_option("--rough", dspec.boundary_roughness, "boundary roughness amplitude");
  gen->add_option("--out", gen_out, "output directory")->required();

  // keypatch
  std::string kp_mask, kp_out;
  bat::keypatch::GeneratorConfig kcfg;
  auto* kp = app.add_subcommand("keypatch", "generate the ground-truth key-patch map for a mask");
  kp->add_option("--mask", kp_mask, "binary mask (PGM)")->required();
  kp->add_option("--radius", kcfg.radius, "disc radius in pixels");
  kp->add_option("--nms", kcfg.nms_neighbors, "NMS neighborhood size");
  kp->add_option("--patch", kcfg.patch_side, "patch side in pixels");
  kp->add_option("--out", kp_out, "output JSON path")->required();

  // train
  bat::model::ModelConfig train_mcfg;
  bat::harness::TrainConfig tcfg;
  std::string train_data, train_val, train_ckpt, train_log, train_config;
  auto* tr = app.add_subcommand("train", "train on a synthetic dataset");
  tr->add_option("--config", train_config, "key=value config file; command-line flags override");
  tr->add_option("--data", train_data, "training dataset directory")->required();
  tr->add_option("--val", train_val, "validation dataset directory")->required();
  tr->add_option("--out", train_ckpt, "best-validation checkpoint path")->required();
  tr->add_option("--log", train_log, "metrics log path (one JSON object per step)")->required();
  tr->add_option("--lr", tcfg.lr, "initial learning rate");
  tr->add_option("--batch", tcfg.batch, "mini-batch size");
  tr->add_option("--epochs", tcfg.max_epochs, "max epochs");
  tr->add_option("--patience", tcfg.plateau_patience, "plateau patience in epochs");
  tr->add_option("--decay", tcfg.lr_decay, "plateau decay factor");
  tr->add_option("--seed", tcfg.seed, "training seed");
  tr->add_flag("--augment", tcfg.augment, "enable flip/scale augmentation");
  add_model_opts(tr, train_mcfg);

  // eval
  std::string eval_data, eval_ckpt, eval_pred, eval_out;
  double eval_threshold = 0.5;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint or prediction maps against a dataset");
  ev->add_option("--data", eval_data, "dataset directory")->required();
  ev->add_option("--ckpt", eval_ckpt, "checkpoint to evaluate");
  ev->add_option("--pred", eval_pred, "directory of <id>.pgm probability maps");
  ev->add_option("--threshold", eval_threshold, "binarization threshold");
  ev->add_option("--out", eval_out, "report JSON path")->required();

  // gradcheck
  bat::model::ModelConfig gc_mcfg;
  int gc_params = 100;
  double gc_tol = 1e-4;
  std::uint64_t gc_seed = 1;
  std::string gc_out;
  auto* gc = app.add_subcommand("gradcheck", "verify analytic gradients with central differences");
  gc->add_option("--params", gc_params, "number of sampled parameters")->check(CLI::PositiveNumber);
  gc->add_option("--tol", gc_tol, "relative-error tolerance");
  gc->add_option("--seed", gc_seed, "seed for batch and sampling");
  gc->add_option("--out", gc_out, "write the JSON report here instead of stdout");
  add_model_opts(gc, gc_mcfg);

  // predict
  std::string pr_data, pr_ckpt, pr_out;
  auto* pr = app.add_subcommand("predict", "write probability maps for every image of a dataset");
  pr->add_option("--data", pr_data, "dataset directory")->required();
  pr->add_option("--ckpt", pr_ckpt, "checkpoint path")->required();
  pr->add_option("--out", pr_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the diagnostic
    return 2;     // usage error
  }

  if (gen->parsed()) {
    dspec.contrast = bat::data::contrast_from_string(contrast);
    bat::data::write_dataset(dspec, gen_out);
    std::cout << "wrote " << dspec.count << " samples to " << gen_out << "\n";
    return 0;
  }

  if (kp->parsed()) {
    const auto mask = bat::read_mask_pgm(kp_mask);
    const auto map = bat::keypatch::generate_keypatch_map(mask, kcfg);
    std::ofstream out(kp_out);
    if (!out) throw std::runtime_error("cannot open '" + kp_out + "' for writing");
    out << bat::keypatch::keypatch_map_to_json(map) << "\n";
    return 0;
  }

  if (tr->parsed()) {
    if (!train_config.empty()) apply_config_file(tr, train_config);
    const auto train_ds = bat::data::read_dataset(train_data);
    const auto val_ds = bat::data::read_dataset(train_val);
    auto result = bat::harness::train(train_ds.samples, val_ds.samples, train_mcfg, tcfg);
    bat::model::save_checkpoint(train_ckpt, result.best_params, train_mcfg);
    std::ofstream log(train_log);
    if (!log) throw std::runtime_error("cannot open '" + train_log + "' for writing");
    for (const auto& line : result.log_lines) log << line << "\n";
    std::cout << "best val seg loss " << result.best_val_loss << " at epoch " << result.best_epoch << "\n";
    return 0;
  }

  if (ev->parsed()) {
    if (eval_ckpt.empty() == eval_pred.empty()) {
      std::cerr << "eval: exactly one of --ckpt or --pred is required\n";
      return 2;
    }
    const auto ds = bat::data::read_dataset(eval_data);
    bat::harness::EvalReport report;
    if (!eval_ckpt.empty()) {
      auto [params, mcfg] = bat::model::load_checkpoint(eval_ckpt);
      report = bat::harness::evaluate(ds.samples, params, mcfg, eval_threshold);
    } else {
      report.threshold = eval_threshold;
      double sd = 0.0, si = 0.0;
      for (const auto& s : ds.samples) {
        const auto pred = bat::read_prob_pgm((fs::path(eval_pred) / (s.id + ".pgm")).string());
        auto [dice, iou] = bat::harness::metrics(s.mask, pred, eval_threshold);
        report.per_sample.push_back({s.id, dice, iou});
        sd += dice;
        si += iou;
      }
      if (!ds.samples.empty()) {
        report.mean_dice = sd / static_cast<double>(ds.samples.size());
        report.mean_iou = si / static_cast<double>(ds.samples.size());
      }
    }
    std::ofstream out(eval_out);
    if (!out) throw std::runtime_error("cannot open '" + eval_out + "' for writing");
    out << bat::harness::eval_report_to_json(report) << "\n";
    std::cout << "mean dice " << report.mean_dice << ", mean iou " << report.mean_iou << "\n";
    return 0;
  }

  if (gc->parsed()) {
    bat::harness::GradCheckOptions opts;
    opts.seed = gc_seed;
    auto report = bat::harness::gradcheck(gc_mcfg, gc_params, gc_tol, opts);
    const std::string text = bat::harness::gradcheck_report_to_json(report);
    if (gc_out.empty()) {
      std::cout << text << "\n";
    } else {
      std::ofstream out(gc_out);
      if (!out) throw std::runtime_error("cannot open '" + gc_out + "' for writing");
      out << text << "\n";
    }
    if (!report.pass) {
      std::cerr << "gradient check failed: max rel err " << report.max_rel_err << " >= " << gc_tol << "\n";
      return 1;
    }
    return 0;
  }

  if (pr->parsed()) {
    const auto ds = bat::data::read_dataset(pr_data);
    auto [params, mcfg] = bat::model::load_checkpoint(pr_ckpt);
    fs::create_directories(pr_out);
    for (const auto& s : ds.samples) {
      auto res = bat::model::forward(s.image, params, mcfg);
      bat::write_prob_pgm(res.seg, (fs::path(pr_out) / (s.id + ".pgm")).string());
    }
    std::cout << "wrote " << ds.samples.size() << " prediction maps to " << pr_out << "\n";
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
