// lmvcat: command-line driver for synthetic data generation, missingness
// simulation, training, evaluation and the gradient-check suite.
//
// Exit codes: 0 ok, 1 runtime failure, 2 usage error, 3 infeasible data.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lmvcat/config.hpp"
#include "lmvcat/lmvcat.hpp"
#include "lmvcat/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;

struct Settings {
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out;

  // data
  std::string data;
  std::string test_data;
  double view_missing = 0.0;
  double label_missing = 0.0;
  double train_ratio = 0.7;
  bool standardize = false;

  // synth
  std::size_t n = 200;
  std::size_t m = 3;
  std::size_t c = 8;
  std::size_t d_latent = 8;
  std::vector<std::size_t> dims;
  double noise = 0.1;

  // model
  std::size_t d_e = 512;
  std::size_t heads = 4;
  std::size_t layers_v = 1;
  std::size_t layers_c = 1;
  double dropout = 0.1;
  double gamma = 2.0;
  std::string precision = "float32";

  // training
  double alpha = 10.0;
  double beta = 0.1;
  std::size_t epochs = 200;
  double lr = 1e-3;
  std::size_t batch = 128;
  std::size_t eval_every = 0;
  bool verbose = false;

  // eval
  std::string checkpoint;
};

json settings_json(const Settings& s) {
  return {{"config", s.config_path},
          {"seed", s.seed},
          {"out", s.out},
          {"data", s.data},
          {"test-data", s.test_data},
          {"view-missing", s.view_missing},
          {"label-missing", s.label_missing},
          {"train-ratio", s.train_ratio},
          {"standardize", s.standardize},
          {"n", s.n},
          {"m", s.m},
          {"c", s.c},
          {"d-latent", s.d_latent},
          {"dims", s.dims},
          {"noise", s.noise},
          {"d-e", s.d_e},
          {"heads", s.heads},
          {"layers-v", s.layers_v},
          {"layers-c", s.layers_c},
          {"dropout", s.dropout},
          {"gamma", s.gamma},
          {"precision", s.precision},
          {"alpha", s.alpha},
          {"beta", s.beta},
          {"epochs", s.epochs},
          {"lr", s.lr},
          {"batch", s.batch},
          {"eval-every", s.eval_every},
          {"checkpoint", s.checkpoint}};
}

json run_manifest(const std::string& command, const Settings& s) {
  return {{"command", command},
          {"config_file", s.config_path},
          {"options", settings_json(s)},
          {"seed", s.seed},
          {"out", s.out}};
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  lmvcat::require(out.good(), lmvcat::ErrorKind::MissingFile, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void finish(const std::string& command, const Settings& s) {
  if (!s.out.empty()) write_json(fs::path(s.out) / "run_manifest.json", run_manifest(command, s));
}

lmvcat::ModelConfig model_config(const Settings& s) {
  lmvcat::ModelConfig cfg;
  cfg.d_e = s.d_e;
  cfg.heads = s.heads;
  cfg.layers_v = s.layers_v;
  cfg.layers_c = s.layers_c;
  cfg.dropout = s.dropout;
  cfg.gamma = s.gamma;
  cfg.precision = lmvcat::parse_precision(s.precision);
  cfg.validate();
  return cfg;
}

lmvcat::TrainConfig train_config(const Settings& s) {
  lmvcat::TrainConfig cfg;
  cfg.epochs = s.epochs;
  cfg.batch_size = s.batch;
  cfg.adam.learning_rate = s.lr;
  cfg.alpha = s.alpha;
  cfg.beta = s.beta;
  cfg.seed = s.seed;
  cfg.eval_every = s.eval_every;
  cfg.verbose = s.verbose;
  cfg.validate();
  return cfg;
}

void require_out(const Settings& s) {
  lmvcat::require(!s.out.empty(), lmvcat::ErrorKind::InvalidArgument, "--out is required");
}

json model_config_json(const lmvcat::ModelConfig& c) {
  return {{"d_e", c.d_e},         {"heads", c.heads},     {"layers_v", c.layers_v},
          {"layers_c", c.layers_c}, {"dropout", c.dropout}, {"gamma", c.gamma},
          {"precision", lmvcat::to_string(c.precision)}};
}

// ---------------------------------------------------------------------------

int cmd_synth(const Settings& s) {
  require_out(s);
  std::vector<std::size_t> dims = s.dims;
  if (dims.empty())
    for (std::size_t v = 0; v < s.m; ++v) dims.push_back(16 + 8 * (v % 3));
  lmvcat::require(dims.size() == s.m, lmvcat::ErrorKind::InvalidArgument, "--dims must list exactly --m values");
  const auto ds = lmvcat::make_synthetic(s.n, s.m, s.c, s.d_latent, dims, s.noise, s.seed);
  const auto manifest = lmvcat::save_dataset(s.out, ds);
  finish("synth", s);
  std::cout << json{{"manifest", manifest.string()}, {"n", s.n}, {"m", s.m}, {"c", s.c}, {"dims", dims}}.dump()
            << '\n';
  return 0;
}

int cmd_corrupt(const Settings& s) {
  require_out(s);
  lmvcat::require(!s.data.empty(), lmvcat::ErrorKind::InvalidArgument, "--data is required");
  auto ds = lmvcat::load_dataset(s.data);
  const std::size_t n = ds.num_samples();
  // Existing masks are intersected with the simulated ones.
  auto w = lmvcat::simulate_missing_views(n, ds.num_views(), s.view_missing, s.seed);
  auto g = lmvcat::simulate_missing_labels(ds.labels, s.label_missing, s.seed + 1);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] *= ds.view_mask[i];
  for (std::size_t i = 0; i < g.size(); ++i) g[i] *= ds.label_mask[i];
  ds = lmvcat::apply_masks(std::move(ds), w, g);
  const auto manifest = lmvcat::save_dataset(s.out, ds);
  finish("corrupt", s);

  std::vector<std::size_t> removed_per_view(ds.num_views(), 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t v = 0; v < ds.num_views(); ++v) removed_per_view[v] += ds.view_mask(i, v) == 0.0;
  std::size_t unknown = 0;
  for (double x : ds.label_mask.data()) unknown += x == 0.0;
  std::cout << json{{"manifest", manifest.string()},
                    {"missing_per_view", removed_per_view},
                    {"unknown_labels", unknown}}
                   .dump()
            << '\n';
  return 0;
}

template <class T>
int train_impl(const Settings& s) {
  require_out(s);
  lmvcat::require(!s.data.empty(), lmvcat::ErrorKind::InvalidArgument, "--data is required");
  const auto mcfg = model_config(s);
  const auto tcfg = train_config(s);
  const fs::path out(s.out);

  lmvcat::MultiViewDataset all = lmvcat::load_dataset(s.data);
  lmvcat::MultiViewDataset train_set, test_set;
  if (!s.test_data.empty()) {
    train_set = std::move(all);
    test_set = lmvcat::load_dataset(s.test_data);
    if (s.view_missing > 0.0) {
      auto w = lmvcat::simulate_missing_views(test_set.num_samples(), test_set.num_views(), s.view_missing, s.seed);
      for (std::size_t i = 0; i < w.size(); ++i) w[i] *= test_set.view_mask[i];
      const auto g = test_set.label_mask;
      test_set = lmvcat::apply_masks(std::move(test_set), w, g);
      auto wt = lmvcat::simulate_missing_views(train_set.num_samples(), train_set.num_views(), s.view_missing,
                                               s.seed + 3);
      for (std::size_t i = 0; i < wt.size(); ++i) wt[i] *= train_set.view_mask[i];
      const auto gt = train_set.label_mask;
      train_set = lmvcat::apply_masks(std::move(train_set), wt, gt);
    }
  } else {
    // Views go missing across the whole set; labels are hidden on the
    // training side only.
    if (s.view_missing > 0.0) {
      auto w = lmvcat::simulate_missing_views(all.num_samples(), all.num_views(), s.view_missing, s.seed);
      for (std::size_t i = 0; i < w.size(); ++i) w[i] *= all.view_mask[i];
      const auto g = all.label_mask;
      all = lmvcat::apply_masks(std::move(all), w, g);
    }
    std::tie(train_set, test_set) = lmvcat::split(all, s.train_ratio, s.seed + 2);
  }
  if (s.label_missing > 0.0) {
    auto g = lmvcat::simulate_missing_labels(train_set.labels, s.label_missing, s.seed + 1);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= train_set.label_mask[i];
    const auto w = train_set.view_mask;
    train_set = lmvcat::apply_masks(std::move(train_set), w, g);
  }
  if (s.standardize) {
    const auto z = lmvcat::ViewStandardizer::fit(train_set);
    z.apply(train_set);
    z.apply(test_set);
  }
  for (double x : test_set.label_mask.data())
    if (x == 0.0) {
      lmvcat::warn("held-out labels contain unknown entries; they are scored as negatives");
      break;
    }

  lmvcat::save_dataset(out / "train", train_set);
  const auto test_manifest = lmvcat::save_dataset(out / "test", test_set);

  auto result = lmvcat::train<T>(mcfg, tcfg, train_set, &test_set);
  std::map<std::string, std::string> meta;
  const json echo = settings_json(s);
  for (const auto& [k, v] : echo.items()) meta[k] = v.dump();
  const fs::path ckpt = out / "checkpoint.bin";
  lmvcat::save_checkpoint(ckpt, result.model, meta);
  lmvcat::write_history(out / "history.jsonl", result.history);

  const auto& last = result.history.epochs.back();
  json report = lmvcat::to_json(*last.eval);
  report["config"] = model_config_json(mcfg);
  report["seed"] = s.seed;
  report["checkpoint"] = ckpt.string();
  report["data"] = test_manifest.string();
  write_json(out / "report.json", report);
  finish("train", s);
  std::cout << report.dump() << '\n';
  return 0;
}

template <class T>
int eval_impl(const Settings& s, const lmvcat::CheckpointHeader& header) {
  const auto model = lmvcat::load_checkpoint<T>(s.checkpoint);
  const auto ds = lmvcat::load_dataset(s.data);
  const auto metrics = lmvcat::evaluate(model, ds);
  json report = lmvcat::to_json(metrics);
  lmvcat::ModelConfig cfg = model.config();
  cfg.precision = header.precision;
  report["config"] = model_config_json(cfg);
  std::uint64_t seed = s.seed;
  if (auto it = header.meta.find("seed"); it != header.meta.end()) seed = json::parse(it->second).get<std::uint64_t>();
  report["seed"] = seed;
  report["checkpoint"] = s.checkpoint;
  report["data"] = s.data;
  if (!s.out.empty()) write_json(fs::path(s.out) / "report.json", report);
  finish("eval", s);
  std::cout << report.dump() << '\n';
  return 0;
}

int cmd_eval(const Settings& s) {
  lmvcat::require(!s.checkpoint.empty(), lmvcat::ErrorKind::InvalidArgument, "--checkpoint is required");
  lmvcat::require(!s.data.empty(), lmvcat::ErrorKind::InvalidArgument, "--data is required");
  const auto header = lmvcat::read_checkpoint_header(s.checkpoint);
  return header.precision == lmvcat::Precision::Float32 ? eval_impl<float>(s, header) : eval_impl<double>(s, header);
}

int cmd_gradcheck(const Settings& s) {
  constexpr double kThreshold = 1e-4;
  const auto r = lmvcat::model_gradient_check(s.seed);
  json groups = json::object();
  for (const auto& [k, v] : r.per_group) groups[k] = v;
  const bool ok = r.max_rel_err < kThreshold;
  finish("gradcheck", s);
  std::cout << json{{"max_rel_err", r.max_rel_err},
                    {"threshold", kThreshold},
                    {"passed", ok},
                    {"worst_param", r.worst_param},
                    {"parameters", r.parameters},
                    {"groups", groups},
                    {"seed", s.seed}}
                   .dump()
            << '\n';
  return ok ? 0 : kExitRuntime;
}

int exit_code_for(lmvcat::ErrorKind kind) {
  switch (kind) {
    case lmvcat::ErrorKind::InvalidArgument:
      return kExitUsage;
    case lmvcat::ErrorKind::InfeasibleRatio:
    case lmvcat::ErrorKind::EmptyRowMask:
    case lmvcat::ErrorKind::DegenerateSplit:
    case lmvcat::ErrorKind::DegenerateMask:
      return kExitData;
    default:
      return kExitRuntime;
  }
}

/// Finds `--config` in argv and expands the file into `--key=value` tokens
/// placed right after the subcommand, so explicit flags (which come later)
/// win under the take-last policy.
std::vector<std::string> expand_config(int argc, char** argv, const std::vector<std::string>& subcommands,
                                       std::string& config_path) {
  std::vector<std::string> args(argv + 1, argv + argc);
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
  }
  if (config_path.empty()) return args;
  std::vector<std::string> injected;
  for (const auto& [k, v] : lmvcat::read_key_values(config_path)) injected.push_back("--" + k + "=" + v);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < args.size(); ++i)
    if (std::find(subcommands.begin(), subcommands.end(), args[i]) != subcommands.end()) {
      pos = i + 1;
      break;
    }
  args.insert(args.begin() + std::ptrdiff_t(pos), injected.begin(), injected.end());
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  Settings s;
  CLI::App app{"LMVCAT: multi-view multi-label classification with missing views and labels"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.fallthrough();

  app.add_option("--config", s.config_path, "flat key=value file; flags override its entries");
  app.add_option("--seed", s.seed, "random seed");
  app.add_option("--out", s.out, "output directory");
  app.add_option("--data", s.data, "dataset manifest (JSON)");
  app.add_option("--test-data", s.test_data, "held-out dataset manifest (train: skips the random split)");
  app.add_option("--view-missing", s.view_missing, "fraction of samples removed per view")->check(CLI::Range(0.0, 0.999999));
  app.add_option("--label-missing", s.label_missing, "fraction of positive and negative labels hidden per category")
      ->check(CLI::Range(0.0, 0.999999));
  app.add_option("--train-ratio", s.train_ratio, "training fraction for the random split")
      ->check(CLI::Range(0.000001, 0.999999));
  app.add_flag("--standardize", s.standardize, "z-score each view using available training rows");
  app.add_option("--n", s.n, "synth: samples")->check(CLI::PositiveNumber);
  app.add_option("--m", s.m, "synth: views")->check(CLI::PositiveNumber);
  app.add_option("--c", s.c, "synth: labels")->check(CLI::PositiveNumber);
  app.add_option("--d-latent", s.d_latent, "synth: latent width")->check(CLI::PositiveNumber);
  app.add_option("--dims", s.dims, "synth: per-view feature widths")->delimiter(',')->check(CLI::PositiveNumber);
  app.add_option("--noise", s.noise, "synth: observation noise std")->check(CLI::NonNegativeNumber);
  app.add_option("--d-e", s.d_e, "embedding width")->check(CLI::PositiveNumber);
  app.add_option("--heads", s.heads, "attention heads")->check(CLI::PositiveNumber);
  app.add_option("--layers-v", s.layers_v, "view encoder depth")->check(CLI::PositiveNumber);
  app.add_option("--layers-c", s.layers_c, "class-token encoder depth")->check(CLI::PositiveNumber);
  app.add_option("--dropout", s.dropout, "dropout rate")->check(CLI::Range(0.0, 0.999999));
  app.add_option("--gamma", s.gamma, "fusion exponent")->check(CLI::PositiveNumber);
  app.add_option("--precision", s.precision, "float32 or float64")->check(CLI::IsMember({"float32", "float64"}));
  app.add_option("--alpha", s.alpha, "graph constraint weight")->check(CLI::NonNegativeNumber);
  app.add_option("--beta", s.beta, "class-token loss weight")->check(CLI::NonNegativeNumber);
  app.add_option("--epochs", s.epochs, "training epochs")->check(CLI::PositiveNumber);
  app.add_option("--lr", s.lr, "Adam learning rate")->check(CLI::PositiveNumber);
  app.add_option("--batch", s.batch, "batch size")->check(CLI::Range(std::size_t{2}, std::size_t{1} << 30));
  app.add_option("--eval-every", s.eval_every, "evaluate every k epochs (0: last only)");
  app.add_flag("--verbose", s.verbose, "per-epoch progress on stderr");
  app.add_option("--checkpoint", s.checkpoint, "eval: checkpoint file");

  auto* synth = app.add_subcommand("synth", "write a synthetic correlated-label dataset");
  auto* corrupt = app.add_subcommand("corrupt", "simulate missing views and labels");
  auto* train = app.add_subcommand("train", "train and evaluate on a held-out split");
  auto* eval = app.add_subcommand("eval", "score a checkpoint on a dataset");
  auto* gradcheck = app.add_subcommand("gradcheck", "64-bit finite-difference check of the full model");

  std::vector<std::string> args;
  try {
    std::string cfg;
    args = expand_config(argc, argv, {"synth", "corrupt", "train", "eval", "gradcheck"}, cfg);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    std::cerr << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  } catch (const lmvcat::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(s);
    if (corrupt->parsed()) return cmd_corrupt(s);
    if (train->parsed())
      return lmvcat::parse_precision(s.precision) == lmvcat::Precision::Float32 ? train_impl<float>(s)
                                                                                : train_impl<double>(s);
    if (eval->parsed()) return cmd_eval(s);
    if (gradcheck->parsed()) return cmd_gradcheck(s);
  } catch (const lmvcat::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
