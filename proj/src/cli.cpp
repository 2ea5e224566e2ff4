#include "memlab/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numbers>
#include <random>

#include "memlab/experiments.hpp"
#include "memlab/uat.hpp"

namespace memlab {

namespace {

struct SynthArgs {
  std::string out;
  std::size_t count = 200;
  std::size_t min_length = 32;
  std::size_t max_length = 64;
  std::uint64_t seed = 0;
};

struct TrainArgs {
  std::string corpus, out, trace, config;
  std::size_t d_model = 64, layers = 2, heads = 4, ffn = 0, context = 0;
  std::size_t epochs = 0, batch_size = 0;
  double lr = 0.0;
  std::string mask;
  std::uint64_t seed = 0;
  bool quiet = false;
};

struct EvalArgs {
  std::string model, corpus, report, outcomes, thresholds;
  std::vector<std::size_t> buckets{0, 64, 128, 256, 512};
};

struct DecomposeArgs {
  std::string model, text;
  bool cue = false, json = false;
};

struct UatArgs {
  std::string function = "sin", optimizer = "gd", schedule = "cosine", activation = "sigmoid", out;
  std::size_t hidden = 32, points = 201, iterations = 100000;
  double step = 0.2, target = 0.05;
  std::uint64_t seed = 0;
};

struct GradArgs {
  std::size_t d_model = 16, layers = 2, heads = 2, seq_len = 8, vocab = 11;
  double eps = 1e-5, scale = 0.3, tolerance = 1e-4;
  std::uint64_t seed = 0;
};

struct ExperimentArgs {
  std::string config, out;
  std::vector<std::string> models;
  std::uint64_t seed = 0;
  bool no_summary = false, summarize_only = false;
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << text;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

int run_synth(const SynthArgs& a, std::ostream& out) {
  const auto records = synth_corpus(a.seed, a.count, a.min_length, a.max_length);
  save_records(a.out, records);
  out << "wrote " << records.size() << " records to " << a.out << "\n";
  return kExitOk;
}

int run_stats(const std::string& path, std::ostream& out) {
  const auto records = load_records(path);
  out << corpus_stats(records, build_corpus_vocab(records).size()).dump(2) << "\n";
  return kExitOk;
}

int run_train(const TrainArgs& a, const CLI::App& cmd, std::ostream& out, std::ostream& err) {
  const auto records = load_records(a.corpus);
  const Vocab vocab = build_corpus_vocab(records);

  TrainConfig tc;
  if (!a.config.empty()) {
    std::ifstream f(a.config);
    if (!f) throw IoError("cannot open train config " + a.config);
    try {
      tc = TrainConfig::from_json(nlohmann::json::parse(f));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("train config " + a.config + " is not JSON: " + e.what());
    }
  }
  if (cmd.count("--epochs")) tc.epochs = a.epochs;
  if (cmd.count("--batch-size")) tc.batch_size = a.batch_size;
  if (cmd.count("--lr")) tc.adam.learning_rate = a.lr;
  if (cmd.count("--mask")) tc.mask = loss_mask_from_string(a.mask);
  if (cmd.count("--seed")) tc.seed = a.seed;
  tc.checkpoint_path = a.out;
  tc.validate();

  TransformerConfig mc;
  mc.vocab_size = vocab.size();
  mc.d_model = a.d_model;
  mc.layers = a.layers;
  mc.heads = a.heads;
  mc.ffn_width = a.ffn;
  mc.seed = tc.seed;
  mc.max_seq_len = a.context;
  if (mc.max_seq_len == 0) {
    for (const auto& r : records) mc.max_seq_len = std::max(mc.max_seq_len, frame_record(vocab, r).tokens.size() - 1);
  }
  TransformerModel model = TransformerModel::init(mc);
  err << "training " << model.parameter_count() << " parameters on " << records.size() << " records\n";
  const TrainTrace trace = train(model, records, vocab, tc, [&](const EpochRecord& e) {
    if (!a.quiet && (e.epoch == 1 || e.epoch % 10 == 0 || e.epoch == tc.epochs)) {
      err << "epoch " << e.epoch << " loss " << fixed(e.mean_loss, 5) << " (" << fixed(e.seconds, 2) << "s)\n";
    }
  });
  if (!a.trace.empty()) trace.save_csv(a.trace);
  out << "final loss " << fixed(trace.epochs.back().mean_loss, 6) << ", checkpoint " << a.out << "\n";
  return kExitOk;
}

int run_eval(const EvalArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.model);
  const Vocab vocab = vocab_from_metadata(ck.metadata);
  const auto records = load_records(a.corpus);
  EvalOptions options;
  options.bucket_edges = a.buckets;
  if (!a.thresholds.empty()) options.thresholds = DistortionThresholds::load(a.thresholds);
  EvalReport report = evaluate_model(ck.model, vocab, records, options);
  report.metadata = {{"model", a.model}, {"model_config", ck.model.config.to_json()}, {"corpus", a.corpus}};
  if (ck.metadata.contains("train")) report.metadata["seed"] = ck.metadata.at("train").value("seed", 0);
  if (!a.report.empty()) write_text(a.report, report.to_json().dump(2) + "\n");
  if (!a.outcomes.empty()) write_text(a.outcomes, report.outcomes_csv());
  out << "N " << report.size() << "  Acc " << fixed(report.accuracy, 4) << "  exact "
      << report.count(DistortionClass::exact) << "  minor " << report.count(DistortionClass::minor) << "  severe "
      << report.count(DistortionClass::severe) << "  loss " << report.count(DistortionClass::loss) << "\n";
  for (const auto& b : report.buckets) {
    out << "  (" << b.lower << "," << b.upper << "]  N " << b.count << "  Acc " << fixed(b.accuracy, 4) << "\n";
  }
  return kExitOk;
}

int run_decompose(const DecomposeArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.model);
  const Vocab vocab = vocab_from_metadata(ck.metadata);
  std::vector<TokenId> tokens;
  if (a.cue) {
    tokens = frame_cue(vocab, a.text);
  } else {
    tokens.push_back(kBos);
    const auto body = vocab.encode(a.text);
    tokens.insert(tokens.end(), body.begin(), body.end());
  }
  const DecompositionReport r = decompose_residual(ck.model, tokens);
  if (a.json) {
    out << r.to_json().dump(2) << "\n";
    return kExitOk;
  }
  out << "positions " << r.base.rows() << "\n";
  out << "embedding         norm " << fixed(r.base.norm(), 6) << "\n";
  for (const auto& c : r.contributions) {
    char label[32];
    std::snprintf(label, sizeof label, "layer %zu %-9s", c.layer, c.kind.c_str());
    out << label << " norm " << fixed(c.norm, 6) << "\n";
  }
  out << "hidden            norm " << fixed(r.hidden.norm(), 6) << "\n";
  out << "relative residual " << sci(r.relative_residual) << "\n";
  return kExitOk;
}

std::function<Eigen::VectorXd(const Eigen::VectorXd&)> named_function(const std::string& name) {
  const auto scalar = [](double (*f)(double)) {
    return [f](const Eigen::VectorXd& x) { return Eigen::VectorXd::Constant(1, f(x(0))); };
  };
  if (name == "sin") return scalar([](double x) { return std::sin(std::numbers::pi * x); });
  if (name == "step") return scalar([](double x) { return x >= 0.0 ? 1.0 : 0.0; });
  if (name == "abs") return scalar([](double x) { return std::abs(x); });
  if (name == "gauss") return scalar([](double x) { return std::exp(-8.0 * x * x); });
  throw ValueError("unknown target function '" + name + "'");
}

int run_uat(const UatArgs& a, std::ostream& out) {
  const SampleSet samples = sample_function(uniform_grid(1, a.points), named_function(a.function));
  FitConfig cfg;
  cfg.step_size = a.step;
  cfg.max_iterations = a.iterations;
  cfg.target_error = a.target;
  cfg.seed = a.seed;
  cfg.schedule = a.schedule == "constant" ? StepSchedule::constant : StepSchedule::cosine;
  cfg.optimizer = a.optimizer == "adam" ? FitOptimizer::adam : FitOptimizer::gradient_descent;
  const FitResult r = uat_fit(samples, a.hidden, cfg, activation_from_string(a.activation));
  if (!a.out.empty()) write_text(a.out, to_json(r.model).dump(2) + "\n");
  out << "sup error " << sci(r.sup_error) << " after " << r.iterations << " iterations, target "
      << (r.reached_target ? "reached" : "not reached") << "\n";
  return kExitOk;
}

int run_gradcheck(const GradArgs& a, std::ostream& out, std::ostream& err) {
  TransformerConfig c;
  c.vocab_size = a.vocab;
  c.d_model = a.d_model;
  c.layers = a.layers;
  c.heads = a.heads;
  c.max_seq_len = a.seq_len;
  c.seed = a.seed;
  TransformerModel model = TransformerModel::init(c);
  randomize_parameters(model, a.seed, a.scale);
  std::mt19937_64 rng(a.seed + 1);
  std::uniform_int_distribution<TokenId> pick(0, static_cast<TokenId>(a.vocab - 1));
  std::vector<TokenId> tokens(a.seq_len + 1);
  for (auto& t : tokens) t = pick(rng);
  const GradCheckResult r = check_model_gradients(model, tokens, a.eps);
  out << "checked " << r.coordinates << " coordinates, max relative error " << sci(r.max_relative_error)
      << " at " << r.worst_index << "\n";
  if (r.max_relative_error >= a.tolerance) {
    err << "gradient check failed: " << sci(r.max_relative_error) << " >= " << sci(a.tolerance) << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

int run_experiment_cmd(const ExperimentArgs& a, const CLI::App& cmd, std::ostream& out) {
  ExperimentConfig cfg = ExperimentConfig::load(a.config);
  if (!a.out.empty()) cfg.output_dir = a.out;
  if (cmd.count("--seed")) {
    cfg.seed = a.seed;
    cfg.train.seed = a.seed;
  }
  ExperimentSummary s;
  if (a.summarize_only) {
    s = merge_summary(cfg);
  } else {
    RunOptions options;
    options.only_models = a.models;
    options.summarize = !a.no_summary;
    s = run_experiment(cfg, options);
    if (!options.summarize) {
      out << "trained and evaluated " << (a.models.empty() ? cfg.models.size() : a.models.size())
          << " model(s) in " << cfg.output_dir << "\n";
      return kExitOk;
    }
  }
  out << s.to_csv();
  return kExitOk;
}

}  // namespace

int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Train tiny transformers to memorise cue -> content records and measure what they recall.", "memlab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "memlab 0.1.0");

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Write a seeded synthetic corpus as JSONL");
  c_synth->add_option("--out", synth.out, "Output JSONL path")->required();
  c_synth->add_option("--count", synth.count, "Number of records")->check(CLI::PositiveNumber);
  c_synth->add_option("--min-length", synth.min_length, "Shortest content, in characters")->check(CLI::PositiveNumber);
  c_synth->add_option("--max-length", synth.max_length, "Longest content, in characters")->check(CLI::PositiveNumber);
  c_synth->add_option("--seed", synth.seed, "Random seed");

  std::string stats_corpus;
  auto* c_stats = app.add_subcommand("stats", "Summarise a corpus: size, length buckets, vocabulary");
  c_stats->add_option("--corpus", stats_corpus, "Corpus JSONL")->required();

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a model on a corpus and write a checkpoint");
  c_train->add_option("--corpus", tr.corpus, "Corpus JSONL")->required();
  c_train->add_option("--out", tr.out, "Checkpoint path")->required();
  c_train->add_option("--config", tr.config, "Train config JSON; flags below override it");
  c_train->add_option("--trace", tr.trace, "Write per-epoch losses as CSV");
  c_train->add_option("--d-model", tr.d_model, "Model width")->check(CLI::PositiveNumber);
  c_train->add_option("--layers", tr.layers, "Transformer blocks");
  c_train->add_option("--heads", tr.heads, "Attention heads")->check(CLI::PositiveNumber);
  c_train->add_option("--ffn", tr.ffn, "Feed-forward width (0: 4 x d-model)");
  c_train->add_option("--context", tr.context, "Context length (0: longest record)");
  c_train->add_option("--epochs", tr.epochs, "Epochs")->check(CLI::PositiveNumber);
  c_train->add_option("--batch-size", tr.batch_size, "Records per step")->check(CLI::PositiveNumber);
  c_train->add_option("--lr", tr.lr, "Adam learning rate")->check(CLI::PositiveNumber);
  c_train->add_option("--mask", tr.mask, "Loss positions")->check(CLI::IsMember({"content", "full"}));
  c_train->add_option("--seed", tr.seed, "Seed for initialisation and shuffling");
  c_train->add_flag("--quiet", tr.quiet, "No per-epoch progress");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Greedy-decode every record and score exact recall");
  c_eval->add_option("--model", ev.model, "Checkpoint")->required();
  c_eval->add_option("--corpus", ev.corpus, "Corpus JSONL")->required();
  c_eval->add_option("--report", ev.report, "Write the report JSON here");
  c_eval->add_option("--outcomes", ev.outcomes, "Write per-record outcomes CSV here");
  c_eval->add_option("--thresholds", ev.thresholds, "Distortion thresholds JSON");
  c_eval->add_option("--buckets", ev.buckets, "Length bucket edges")->delimiter(',');

  DecomposeArgs de;
  auto* c_dec = app.add_subcommand("decompose", "Split the residual stream of a prompt into sublayer contributions");
  c_dec->add_option("--model", de.model, "Checkpoint")->required();
  c_dec->add_option("--text", de.text, "Prompt text")->required();
  c_dec->add_flag("--cue", de.cue, "Frame the text as a cue (BOS cue SEP)");
  c_dec->add_flag("--json", de.json, "Print JSON");

  UatArgs ua;
  auto* c_uat = app.add_subcommand("uat-fit", "Fit a one-hidden-layer sigmoidal sum to a function on [-1, 1]");
  c_uat->add_option("--function", ua.function, "Target")->check(CLI::IsMember({"sin", "step", "abs", "gauss"}));
  c_uat->add_option("--hidden", ua.hidden, "Hidden units")->check(CLI::PositiveNumber);
  c_uat->add_option("--points", ua.points, "Grid points")->check(CLI::Range(2, 1000000));
  c_uat->add_option("--iterations", ua.iterations, "Maximum iterations")->check(CLI::PositiveNumber);
  c_uat->add_option("--step", ua.step, "Step size")->check(CLI::PositiveNumber);
  c_uat->add_option("--target", ua.target, "Stop below this sup error")->check(CLI::PositiveNumber);
  c_uat->add_option("--optimizer", ua.optimizer, "Update rule")->check(CLI::IsMember({"gd", "adam"}));
  c_uat->add_option("--schedule", ua.schedule, "Step schedule")->check(CLI::IsMember({"cosine", "constant"}));
  c_uat->add_option("--activation", ua.activation, "Unit activation")
      ->check(CLI::IsMember({"sigmoid", "relu", "gelu"}));
  c_uat->add_option("--out", ua.out, "Write the fitted model JSON here");
  c_uat->add_option("--seed", ua.seed, "Initialisation seed");

  GradArgs gr;
  auto* c_grad = app.add_subcommand("gradcheck", "Compare model gradients with central differences");
  c_grad->add_option("--d-model", gr.d_model, "Model width")->check(CLI::PositiveNumber);
  c_grad->add_option("--layers", gr.layers, "Transformer blocks");
  c_grad->add_option("--heads", gr.heads, "Attention heads")->check(CLI::PositiveNumber);
  c_grad->add_option("--seq-len", gr.seq_len, "Sequence length")->check(CLI::PositiveNumber);
  c_grad->add_option("--vocab", gr.vocab, "Vocabulary size")->check(CLI::Range(2, 100000));
  c_grad->add_option("--eps", gr.eps, "Finite-difference step")->check(CLI::PositiveNumber);
  c_grad->add_option("--scale", gr.scale, "Parameters are drawn from uniform(-scale, scale)")
      ->check(CLI::PositiveNumber);
  c_grad->add_option("--tolerance", gr.tolerance, "Largest accepted relative error")->check(CLI::PositiveNumber);
  c_grad->add_option("--seed", gr.seed, "Seed for parameters and tokens");

  ExperimentArgs ex;
  auto* c_exp = app.add_subcommand("experiment", "Train, evaluate and summarise every model in a config");
  c_exp->add_option("--config", ex.config, "Experiment config JSON")->required();
  c_exp->add_option("--out", ex.out, "Output directory (overrides the config)");
  c_exp->add_option("--model", ex.models, "Only run these models (repeatable)");
  c_exp->add_option("--seed", ex.seed, "Override the config seed");
  auto* no_summary = c_exp->add_flag("--no-summary", ex.no_summary, "Skip the summary files");
  c_exp->add_flag("--summarize-only", ex.summarize_only, "Merge existing model reports into the summary")
      ->excludes(no_summary);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::CallForVersion& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  try {
    if (*c_synth) return run_synth(synth, out);
    if (*c_stats) return run_stats(stats_corpus, out);
    if (*c_train) return run_train(tr, *c_train, out, err);
    if (*c_eval) return run_eval(ev, out);
    if (*c_dec) return run_decompose(de, out);
    if (*c_uat) return run_uat(ua, out);
    if (*c_grad) return run_gradcheck(gr, out, err);
    if (*c_exp) return run_experiment_cmd(ex, *c_exp, out);
  } catch (const std::exception& e) {
    err << "memlab: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace memlab
