#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>

#include "aevb/baselines.hpp"
#include "aevb/dataio.hpp"
#include "aevb/errors.hpp"
#include "aevb/evalkit.hpp"
#include "aevb/train.hpp"

namespace aevb::cli {

namespace fs = std::filesystem;

namespace {

// A user-facing configuration problem; exits with kUsageError.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// ---- options shared between commands ----

struct DataOptions {
  std::string dataset;
  std::string test_dataset;
  std::size_t test_points = 0;
  std::optional<double> binarize;
  std::uint64_t seed = 0;
};

void add_data_options(CLI::App* app, DataOptions& o, bool required) {
  auto* d = app->add_option("--dataset", o.dataset,
                            "IDX image file, CSV file (values 0-255), or synthetic:<linear|binary>:<n>");
  if (required) d->required();
  app->add_option("--test-dataset", o.test_dataset, "separate test-split file");
  app->add_option("--test-points", o.test_points, "use the last n rows of --dataset as the test split");
  app->add_option("--binarize", o.binarize, "threshold intensities at this value")->check(CLI::Range(0.0, 1.0));
}

Dataset load_data(const DataOptions& o) {
  Dataset ds = is_synthetic_spec(o.dataset) ? synthetic_dataset(o.dataset, o.seed) : load_dataset(o.dataset);
  if (!o.test_dataset.empty()) {
    if (o.test_points > 0) throw UsageError("--test-dataset and --test-points are exclusive");
    const Dataset test = load_dataset(o.test_dataset);
    if (test.x.cols() != ds.x.cols())
      throw UsageError("test dataset has " + std::to_string(test.x.cols()) + " columns, training data " +
                       std::to_string(ds.x.cols()));
    Matrix all(ds.size() + test.size(), ds.x.cols());
    std::copy(ds.x.flat().begin(), ds.x.flat().end(), all.flat().begin());
    std::copy(test.x.flat().begin(), test.x.flat().end(), all.flat().begin() + ds.x.size());
    ds.train_end = ds.size();
    ds.x = std::move(all);
  } else if (o.test_points > 0) {
    split_tail(ds, o.test_points);
  }
  if (o.binarize) binarize(ds, *o.binarize);
  return ds;
}

struct TrainOptions {
  DataOptions data;
  std::string out_dir = "run";
  std::string resume;
  // model
  std::size_t latent_dim = 10;
  std::optional<std::size_t> hidden;
  std::size_t encoder_hidden = 500;
  std::size_t decoder_hidden = 500;
  std::string decoder = "bernoulli";
  bool clamp_mean = false;
  // TrainConfig
  TrainConfig cfg;
  std::string optimizer = "adagrad";
  std::string estimator = "B";
  std::string stepsize_candidates = "0.01,0.02,0.1";
  // McemConfig
  McemConfig mcem;
};

void add_train_options(CLI::App* app, TrainOptions& o) {
  add_data_options(app, o.data, true);
  app->add_option("--seed", o.data.seed, "random seed");
  app->add_option("--out", o.out_dir, "output directory")->capture_default_str();
  app->add_option("--resume", o.resume, "continue from a checkpoint file");
  app->add_option("--latent-dim", o.latent_dim, "latent dimensionality J")->capture_default_str()->check(CLI::PositiveNumber);
  app->add_option("--hidden", o.hidden, "hidden units of both encoder and decoder")->check(CLI::PositiveNumber);
  app->add_option("--encoder-hidden", o.encoder_hidden)->capture_default_str()->check(CLI::PositiveNumber);
  app->add_option("--decoder-hidden", o.decoder_hidden)->capture_default_str()->check(CLI::PositiveNumber);
  app->add_option("--decoder", o.decoder, "bernoulli, gaussian or linear_gaussian")->capture_default_str();
  app->add_flag("--clamp-mean", o.clamp_mean, "sigmoid on the Gaussian decoder mean");
  app->add_option("--minibatch-size", o.cfg.minibatch_size)->capture_default_str();
  app->add_option("--samples-per-point", o.cfg.samples_per_point)->capture_default_str();
  app->add_option("--optimizer", o.optimizer, "adagrad or sgd")->capture_default_str();
  app->add_option("--stepsize", o.cfg.stepsize)->capture_default_str();
  app->add_option("--stepsize-candidates", o.stepsize_candidates, "comma-separated")->capture_default_str();
  app->add_flag("--select-stepsize", o.cfg.select_stepsize, "pick --stepsize from the candidates first (aevb)");
  app->add_option("--epochs", o.cfg.epochs)->capture_default_str();
  app->add_option("--max-examples", o.cfg.max_examples, "0: epochs * N")->capture_default_str();
  app->add_flag("--weight-decay,!--no-weight-decay", o.cfg.weight_decay, "N(0, I) prior on decoder weights")
      ->capture_default_str();
  app->add_option("--eval-every", o.cfg.eval_every, "examples between evaluations; 0: each epoch")->capture_default_str();
  app->add_option("--eval-points", o.cfg.eval_points, "evaluate on the first n points; 0: all")->capture_default_str();
  app->add_option("--checkpoint-every", o.cfg.checkpoint_every, "examples; 0: at evaluations")->capture_default_str();
  app->add_option("--estimator", o.estimator, "A or B")->capture_default_str();
  app->add_option("--leapfrog-steps", o.mcem.hmc.leapfrog_steps, "MCEM sampler")->capture_default_str();
  app->add_option("--target-acceptance", o.mcem.hmc.target_acceptance, "MCEM sampler")->capture_default_str();
  app->add_option("--updates-per-sample", o.mcem.updates_per_sample, "MCEM")->capture_default_str();
  app->add_option("--adapt-iterations", o.mcem.adapt_iterations, "MCEM")->capture_default_str();
  app->add_option("--max-retries", o.mcem.max_retries, "MCEM")->capture_default_str();
  app->add_option("--mcem-eval-samples", o.mcem.eval_samples, "MCEM marginal-likelihood samples per point")
      ->capture_default_str();
}

DecoderFamily parse_family(std::string s) {
  std::replace(s.begin(), s.end(), '-', '_');
  return parse_decoder_family(s);
}

Estimator parse_estimator(const std::string& s) {
  if (s == "A" || s == "a") return Estimator::A;
  if (s == "B" || s == "b") return Estimator::B;
  throw UsageError("unknown estimator '" + s + "' (expected A or B)");
}

void finish_train_options(TrainOptions& o, const Dataset& ds) {
  if (o.hidden) o.encoder_hidden = o.decoder_hidden = *o.hidden;
  o.cfg.optimizer = parse_optimizer(o.optimizer);
  o.cfg.estimator = parse_estimator(o.estimator);
  o.cfg.seed = o.data.seed;
  o.cfg.stepsize_candidates.clear();
  for (const auto& s : split_list(o.stepsize_candidates)) {
    try {
      o.cfg.stepsize_candidates.push_back(std::stod(s));
    } catch (const std::exception&) {
      throw UsageError("bad stepsize candidate '" + s + "'");
    }
  }
  o.cfg.validate();
  o.mcem.validate();
  if (ds.train_end == 0) throw UsageError("dataset has no training rows");
}

VaeShape shape_of(const TrainOptions& o, const Dataset& ds) {
  VaeShape s{ds.x.cols(), o.encoder_hidden, o.decoder_hidden, o.latent_dim, parse_family(o.decoder), o.clamp_mean};
  s.validate();
  return s;
}

std::optional<TrainState> resume_state(const TrainOptions& o, const VaeShape& shape, Algorithm algo) {
  if (o.resume.empty()) return std::nullopt;
  Checkpoint ck = load_checkpoint(o.resume);
  if (!(ck.state.model.shape() == shape))
    throw UsageError("checkpoint '" + o.resume + "' has a different model topology");
  if (ck.algorithm != algo)
    throw UsageError("checkpoint '" + o.resume + "' was written by " + algorithm_name(ck.algorithm));
  return std::move(ck.state);
}

std::pair<std::size_t, std::size_t> image_shape(const Dataset& ds) {
  if (ds.image_h * ds.image_w == ds.x.cols()) return {ds.image_h, ds.image_w};
  return infer_image_shape(ds.x.cols());
}

void write_text(const fs::path& p, const std::string& s) {
  write_file(p.string(), std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

// Runs one algorithm, writing checkpoints under `prefix` as it goes. Returns
// the final state or rethrows TrainingAborted after saving the last good state.
TrainState run_one(Algorithm algo, const TrainOptions& o, const Dataset& ds, const VaeShape& shape,
                   const fs::path& dir, const std::string& prefix) {
  const Matrix train_x = ds.train(), test_x = ds.test();
  const Matrix* test = test_x.rows() > 0 ? &test_x : nullptr;
  const auto [h, w] = image_shape(ds);
  TrainHooks hooks;
  hooks.on_checkpoint = [&, h = h, w = w](const TrainState& s) {
    save_checkpoint((dir / (prefix + "checkpoint.aevb")).string(), {s, algo, h, w});
  };
  try {
    TrainState st = train_algorithm(algo, train_x, test, shape, o.cfg, o.mcem, hooks, resume_state(o, shape, algo));
    save_checkpoint((dir / (prefix + "final.aevb")).string(), {st, algo, h, w});
    return st;
  } catch (const TrainingAborted& e) {
    save_checkpoint((dir / (prefix + "last_good.aevb")).string(), {e.last_good(), algo, h, w});
    throw;
  }
}

int cmd_train(const TrainOptions& opts, const std::string& algorithm, std::ostream& out) {
  TrainOptions o = opts;
  const Algorithm algo = parse_algorithm(algorithm);
  const Dataset ds = load_data(o.data);
  finish_train_options(o, ds);
  const VaeShape shape = shape_of(o, ds);
  const fs::path dir(o.out_dir);
  fs::create_directories(dir);
  try {
    const TrainState st = run_one(algo, o, ds, shape, dir, "");
    std::ostringstream csv;
    write_metrics_csv(csv, st.metrics);
    write_text(dir / "metrics.csv", csv.str());
    const MetricPoint& last = st.metrics.back();
    out << algorithm_name(algo) << ": " << st.examples_seen << " examples, train bound " << last.train_bound;
    if (last.test_bound) out << ", test bound " << *last.test_bound;
    out << '\n';
  } catch (const TrainingAborted& e) {
    std::ostringstream csv;
    write_metrics_csv(csv, e.last_good().metrics);
    write_text(dir / "metrics.csv", csv.str());
    throw;
  }
  return kOk;
}

int cmd_compare(const TrainOptions& opts, const std::string& algorithms, std::ostream& out) {
  TrainOptions o = opts;
  if (!o.resume.empty()) throw UsageError("compare does not take --resume");
  std::vector<Algorithm> algos;
  for (const auto& a : split_list(algorithms)) algos.push_back(parse_algorithm(a));
  if (algos.empty()) throw UsageError("--algorithms is empty");
  const Dataset ds = load_data(o.data);
  finish_train_options(o, ds);
  const VaeShape shape = shape_of(o, ds);
  const fs::path dir(o.out_dir);
  fs::create_directories(dir);
  std::vector<std::pair<Algorithm, std::vector<MetricPoint>>> runs;
  int status = kOk;
  for (Algorithm a : algos) {
    try {
      const TrainState st = run_one(a, o, ds, shape, dir, algorithm_name(a) + "-");
      runs.emplace_back(a, st.metrics);
      out << algorithm_name(a) << ": train bound " << st.metrics.back().train_bound;
      if (st.metrics.back().test_bound) out << ", test bound " << *st.metrics.back().test_bound;
      out << '\n';
    } catch (const TrainingAborted& e) {
      runs.emplace_back(a, e.last_good().metrics);
      out << algorithm_name(a) << ": aborted (" << e.what() << ")\n";
      status = kNumericFailure;
    }
  }
  std::ostringstream csv;
  write_compare_csv(csv, runs);
  write_text(dir / "compare.csv", csv.str());
  return status;
}

struct MllOptions {
  DataOptions data;
  std::string checkpoint;
  std::size_t num_points = 1000;
  std::size_t samples = 50;
  HmcConfig hmc = mll_hmc_defaults();
  std::string output = "-";
};

int cmd_mll(const MllOptions& o, std::ostream& out, std::ostream& err) {
  if (o.num_points == 0) throw UsageError("--num-points must be positive");
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const Dataset ds = load_data(o.data);
  const VaeModel& m = ck.state.model;
  if (ds.x.cols() != m.data_dim())
    throw UsageError("dataset has " + std::to_string(ds.x.cols()) + " columns, model expects " +
                     std::to_string(m.data_dim()));
  o.hmc.validate();
  if (m.latent_dim() > kMaxReliableLatentDim)
    err << "warning: latent dimension " << m.latent_dim() << " exceeds " << kMaxReliableLatentDim
        << "; the marginal likelihood estimate is unreliable\n";
  // The test split when one is given, the whole dataset otherwise.
  const Matrix x = ds.train_end < ds.size() ? ds.test() : ds.x;
  const std::size_t n = std::min(o.num_points, x.rows());
  std::ostringstream csv;
  csv.precision(17);
  csv << "datapoint_index,log_marginal_estimate\n";
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = Rng::split(o.data.seed, i);
    const MarginalEstimate e = marginal_loglik_estimate(m.decoder, x.row(i), o.samples, o.hmc, rng);
    csv << i << ',' << e.log_marginal << '\n';
  }
  if (o.output == "-")
    out << csv.str();
  else
    write_text(o.output, csv.str());
  return kOk;
}

struct GridOptions {
  std::string checkpoint;
  std::size_t count = 100;
  std::size_t grid = 20;
  std::uint64_t seed = 0;
  std::string output;
};

std::pair<std::size_t, std::size_t> checkpoint_image_shape(const Checkpoint& ck) {
  const std::size_t d = ck.state.model.data_dim();
  if (ck.image_h * ck.image_w == d) return {ck.image_h, ck.image_w};
  return infer_image_shape(d);
}

int cmd_sample(const GridOptions& o) {
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const auto [h, w] = checkpoint_image_shape(ck);
  Rng rng(o.seed);
  write_pgm(o.output, sample_grid(ck.state.model, o.count, h, w, rng));
  return kOk;
}

int cmd_manifold(const GridOptions& o) {
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  if (ck.state.model.latent_dim() != 2)
    throw UsageError("manifold needs a model with a 2-dimensional latent space, checkpoint has " +
                     std::to_string(ck.state.model.latent_dim()));
  const auto [h, w] = checkpoint_image_shape(ck);
  write_pgm(o.output, manifold_grid(ck.state.model, o.grid, h, w));
  return kOk;
}

// Splices config-file entries in front of the command-line arguments so that
// flags given on the command line win.
std::vector<std::string> expand_config(const std::vector<std::string>& args, CLI::App& app) {
  if (args.empty()) return args;
  std::vector<std::string> rest;
  std::optional<std::string> config;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      config = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (!config) return args;
  CLI::App* sub = nullptr;
  for (CLI::App* s : app.get_subcommands({}))
    if (s->get_name() == args[0]) sub = s;
  if (!sub) throw UsageError("--config needs a command first");
  const auto bytes = read_file(*config);
  std::vector<std::string> expanded{args[0]};
  for (const ConfigEntry& e : parse_config(std::string(bytes.begin(), bytes.end()))) {
    if (e.key == "config" || e.key == "help" || !sub->get_option_no_throw("--" + e.key))
      throw UsageError(*config + ":" + std::to_string(e.line) + ": unknown key '" + e.key + "' for " + args[0]);
    expanded.push_back("--" + e.key + "=" + e.value);
  }
  expanded.insert(expanded.end(), rest.begin() + 1, rest.end());
  return expanded;
}

}  // namespace

std::vector<ConfigEntry> parse_config(const std::string& text_in) {
  std::string text = text_in;
  if (text.rfind("\xEF\xBB\xBF", 0) == 0) text.erase(0, 3);
  std::vector<ConfigEntry> out;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError("config line " + std::to_string(n) + ": expected key = value");
    ConfigEntry e{trim(line.substr(0, eq)), trim(line.substr(eq + 1)), n};
    if (e.key.empty()) throw UsageError("config line " + std::to_string(n) + ": empty key");
    out.push_back(std::move(e));
  }
  return out;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Auto-encoding variational Bayes: training, evaluation and rendering", "aevb"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1, 1);
  std::string config_help;

  TrainOptions train_opts;
  std::string algorithm = "aevb";
  auto* train = app.add_subcommand("train", "train a model; writes metrics.csv and checkpoints");
  add_train_options(train, train_opts);
  train->add_option("--algorithm", algorithm, "aevb, wake_sleep or mcem")->capture_default_str();
  train->add_option("--config", config_help, "key = value file; command-line flags override it");

  TrainOptions compare_opts;
  std::string algorithms = "aevb,wake_sleep,mcem";
  auto* compare = app.add_subcommand("compare", "train several algorithms on one budget; writes compare.csv");
  add_train_options(compare, compare_opts);
  compare->add_option("--algorithms", algorithms, "comma-separated")->capture_default_str();
  compare->add_option("--config", config_help, "key = value file; command-line flags override it");

  MllOptions mll_opts;
  auto* mll = app.add_subcommand("mll", "per-datapoint marginal log-likelihood estimates as CSV");
  mll->add_option("--checkpoint", mll_opts.checkpoint, "model checkpoint")->required();
  add_data_options(mll, mll_opts.data, true);
  mll->add_option("--seed", mll_opts.data.seed, "random seed");
  mll->add_option("--num-points", mll_opts.num_points, "first n points (of the test split if any)")
      ->capture_default_str();
  mll->add_option("--samples", mll_opts.samples, "posterior samples L")->capture_default_str();
  mll->add_option("--leapfrog-steps", mll_opts.hmc.leapfrog_steps)->capture_default_str();
  mll->add_option("--burn-in", mll_opts.hmc.burn_in)->capture_default_str();
  mll->add_option("--thinning", mll_opts.hmc.thinning)->capture_default_str();
  mll->add_option("--target-acceptance", mll_opts.hmc.target_acceptance)->capture_default_str();
  mll->add_option("--stepsize", mll_opts.hmc.stepsize, "initial sampler stepsize")->capture_default_str();
  mll->add_option("--output", mll_opts.output, "CSV path, - for stdout")->capture_default_str();
  mll->add_option("--config", config_help, "key = value file; command-line flags override it");

  GridOptions sample_opts;
  sample_opts.output = "samples.pgm";
  auto* sample = app.add_subcommand("sample", "PGM grid of decoder means at z ~ N(0, I)");
  sample->add_option("--checkpoint", sample_opts.checkpoint, "model checkpoint")->required();
  sample->add_option("--count", sample_opts.count, "number of samples")->capture_default_str()->check(CLI::PositiveNumber);
  sample->add_option("--seed", sample_opts.seed, "random seed");
  sample->add_option("--output", sample_opts.output)->capture_default_str();
  sample->add_option("--config", config_help, "key = value file; command-line flags override it");

  GridOptions manifold_opts;
  manifold_opts.output = "manifold.pgm";
  auto* manifold = app.add_subcommand("manifold", "PGM grid over the 2-D latent space");
  manifold->add_option("--checkpoint", manifold_opts.checkpoint, "model checkpoint")->required();
  manifold->add_option("--grid", manifold_opts.grid, "cells per side")->capture_default_str()->check(CLI::PositiveNumber);
  manifold->add_option("--seed", manifold_opts.seed, "unused; accepted for uniformity");
  manifold->add_option("--output", manifold_opts.output)->capture_default_str();
  manifold->add_option("--config", config_help, "key = value file; command-line flags override it");

  try {
    std::vector<std::string> expanded = expand_config(args, app);
    std::reverse(expanded.begin(), expanded.end());
    app.parse(expanded);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsageError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  }

  try {
    if (train->parsed()) return cmd_train(train_opts, algorithm, out);
    if (compare->parsed()) return cmd_compare(compare_opts, algorithms, out);
    if (mll->parsed()) return cmd_mll(mll_opts, out, err);
    if (sample->parsed()) return cmd_sample(sample_opts);
    if (manifold->parsed()) return cmd_manifold(manifold_opts);
  } catch (const TrainingAborted& e) {
    err << "training aborted: " << e.what() << "; last good state saved\n";
    return kNumericFailure;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kNumericFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  }
  return kUsageError;
}

}  // namespace aevb::cli
