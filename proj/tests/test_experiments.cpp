#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "memlab/cli.hpp"
#include "memlab/experiments.hpp"

using namespace memlab;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("memlab_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

nlohmann::json tiny_config_doc() {
  return nlohmann::json::parse(R"({
    "version": 1,
    "name": "tiny",
    "seed": 4,
    "corpus": {"name": "mini", "count": 10, "min_length": 6, "max_length": 10},
    "models": [
      {"name": "wide", "d_model": 16, "layers": 1, "heads": 2},
      {"name": "narrow", "d_model": 8, "layers": 1, "heads": 2}
    ],
    "train": {"epochs": 3, "batch_size": 4, "learning_rate": 0.003},
    "eval": {"bucket_edges": [0, 16, 32]}
  })");
}

struct Cli {
  int code = -1;
  std::string out, err;
};

Cli run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "memlab");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Cli r;
  r.code = cli_dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

}  // namespace

TEST_CASE("fnv1a64 reference values") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ull);
}

TEST_CASE("experiment config") {
  const ExperimentConfig c = ExperimentConfig::from_json(tiny_config_doc());
  CHECK(c.models.size() == 2);
  CHECK(c.train.seed == 4);
  CHECK(c.train.epochs == 3);
  CHECK(c.corpus.synthetic());
  CHECK(c.hash().size() == 16);

  SUBCASE("hash ignores the output directory and tracks everything else") {
    ExperimentConfig moved = c;
    moved.output_dir = "/elsewhere";
    CHECK(moved.hash() == c.hash());
    ExperimentConfig reseeded = c;
    reseeded.seed = 5;
    CHECK(reseeded.hash() != c.hash());
    CHECK(ExperimentConfig::from_json(c.to_json()).hash() == c.hash());
  }
  SUBCASE("fail fast on malformed documents") {
    auto doc = tiny_config_doc();
    doc.erase("version");
    CHECK_THROWS_WITH_AS(ExperimentConfig::from_json(doc), doctest::Contains("version"), ConfigError);
    doc = tiny_config_doc();
    doc["version"] = 2;
    CHECK_THROWS_AS(ExperimentConfig::from_json(doc), ConfigError);
    doc = tiny_config_doc();
    doc["colour"] = "blue";
    CHECK_THROWS_WITH_AS(ExperimentConfig::from_json(doc), doctest::Contains("colour"), ConfigError);
    doc = tiny_config_doc();
    doc["models"][0]["dropout"] = 0.1;
    CHECK_THROWS_AS(ExperimentConfig::from_json(doc), ConfigError);
    doc = tiny_config_doc();
    doc["train"]["seed"] = 3;
    CHECK_THROWS_AS(ExperimentConfig::from_json(doc), ConfigError);
    doc = tiny_config_doc();
    doc["models"][1]["name"] = "wide";
    CHECK_THROWS_WITH_AS(ExperimentConfig::from_json(doc), doctest::Contains("twice"), ConfigError);
    doc = tiny_config_doc();
    doc["models"][0]["heads"] = 3;
    CHECK_THROWS_AS(ExperimentConfig::from_json(doc), ConfigError);
    doc = tiny_config_doc();
    doc["corpus"]["bucket"] = "medium";
    CHECK_THROWS_AS(ExperimentConfig::from_json(doc), ConfigError);
    doc = tiny_config_doc();
    doc["corpus"]["path"] = "x.jsonl";
    CHECK_THROWS_AS(ExperimentConfig::from_json(doc), ConfigError);
    doc = tiny_config_doc();
    doc["eval"]["bucket_edges"] = {0, 10, 5};
    CHECK_THROWS_AS(ExperimentConfig::from_json(doc), ConfigError);
    doc = tiny_config_doc();
    doc["models"] = nlohmann::json::array();
    CHECK_THROWS_AS(ExperimentConfig::from_json(doc), ConfigError);
  }
}

TEST_CASE("experiment config files resolve paths next to themselves") {
  TempDir tmp;
  fs::create_directories(tmp.path / "cfg");
  save_records(tmp / "cfg/c.jsonl", synth_corpus(1, 5, 6, 8));
  {
    std::ofstream t(tmp / "cfg/t.json");
    t << R"({"version": 1, "minor": 0.2})";
    auto doc = tiny_config_doc();
    doc["corpus"] = {{"name", "file"}, {"path", "c.jsonl"}};
    doc["eval"]["thresholds"] = "t.json";
    doc["output_dir"] = "../out";
    std::ofstream f(tmp / "cfg/exp.json");
    f << doc.dump();
  }
  const ExperimentConfig c = ExperimentConfig::load(tmp / "cfg/exp.json");
  CHECK(c.eval.thresholds.minor == 0.2);
  CHECK(fs::path(c.output_dir) == (tmp.path / "out").lexically_normal());
  CHECK(load_experiment_corpus(c).size() == 5);
  CHECK_THROWS_AS(ExperimentConfig::load(tmp / "cfg/missing.json"), IoError);
}

TEST_CASE("run_experiment") {
  TempDir tmp;
  ExperimentConfig c = ExperimentConfig::from_json(tiny_config_doc());
  c.output_dir = tmp / "a";
  const ExperimentSummary s = run_experiment(c);

  SUBCASE("rows are ordered by parameter count and match the reports") {
    std::vector<std::string> order;
    for (const auto& r : s.rows) {
      if (r.bucket == "all") order.push_back(r.model_name);
    }
    CHECK(order == std::vector<std::string>{"narrow", "wide"});
    for (std::size_t i = 1; i < s.rows.size(); ++i) CHECK(s.rows[i - 1].n_params <= s.rows[i].n_params);
    for (const auto& name : order) {
      const auto report = nlohmann::json::parse(slurp(fs::path(c.output_dir) / name / "report.json"));
      CHECK(s.accuracy(name) == report.at("accuracy").get<double>());
      CHECK(report.at("metadata").at("config_hash") == c.hash());
      CHECK(report.at("N") == 10);
      CHECK(report.at("metadata").at("model_config").at("d_model") == (name == "wide" ? 16 : 8));
      CHECK(report.at("metadata").at("corpus_spec").at("name") == "mini");
    }
    std::size_t bucket_n = 0;
    for (const auto& r : s.rows) {
      if (r.model_name == "wide" && r.bucket != "all") bucket_n += r.n;
    }
    CHECK(bucket_n == 10);
  }
  SUBCASE("files are self-describing") {
    const std::string csv = slurp(fs::path(c.output_dir) / "summary.csv");
    CHECK(csv.find("config_hash=" + c.hash()) != std::string::npos);
    CHECK(csv.find("seed=4") != std::string::npos);
    CHECK(csv.find("model_name,n_params,corpus,bucket,N,acc,minor,severe,loss\n") != std::string::npos);
    const auto summary = nlohmann::json::parse(slurp(fs::path(c.output_dir) / "summary.json"));
    CHECK(summary.at("config_hash") == c.hash());
    CHECK(slurp(fs::path(c.output_dir) / "wide" / "trace.csv").rfind("# experiment=tiny", 0) == 0);
    const Checkpoint ck = load_checkpoint((fs::path(c.output_dir) / "wide" / "checkpoint.bin").string());
    CHECK(ck.metadata.at("config_hash") == c.hash());
    CHECK(ck.metadata.at("seed") == 4);
    CHECK(vocab_from_metadata(ck.metadata) == build_corpus_vocab(load_experiment_corpus(c)));
  }
  SUBCASE("a rerun elsewhere produces identical bytes") {
    ExperimentConfig again = c;
    again.output_dir = tmp / "b";
    run_experiment(again);
    for (const auto& entry : fs::recursive_directory_iterator(c.output_dir)) {
      if (!entry.is_regular_file()) continue;
      const fs::path rel = fs::relative(entry.path(), c.output_dir);
      CHECK_MESSAGE(slurp(entry.path()) == slurp(fs::path(again.output_dir) / rel), rel.string());
    }
  }
  SUBCASE("models can run separately and merge afterwards") {
    ExperimentConfig split = c;
    split.output_dir = tmp / "c";
    RunOptions first;
    first.only_models = {"wide"};
    first.summarize = false;
    run_experiment(split, first);
    CHECK_THROWS_AS(merge_summary(split), ExperimentError);
    RunOptions second;
    second.only_models = {"narrow"};
    second.summarize = false;
    run_experiment(split, second);
    merge_summary(split);
    CHECK(slurp(fs::path(split.output_dir) / "summary.csv") == slurp(fs::path(c.output_dir) / "summary.csv"));
  }
  SUBCASE("errors carry the phase") {
    ExperimentConfig bad = c;
    bad.output_dir = tmp / "d";
    bad.models[0].max_seq_len = 4;
    CHECK_THROWS_WITH_AS(run_experiment(bad), doctest::Contains("model 'wide', train"), ExperimentError);
    RunOptions unknown;
    unknown.only_models = {"huge"};
    CHECK_THROWS_AS(run_experiment(c, unknown), ConfigError);
  }
}

TEST_CASE("cli") {
  TempDir tmp;

  SUBCASE("usage errors exit 1") {
    CHECK(run_cli({}).code == kExitUsage);
    const Cli unknown = run_cli({"synth", "--out", tmp / "c.jsonl", "--bogus"});
    CHECK(unknown.code == kExitUsage);
    CHECK(unknown.err.find("bogus") != std::string::npos);
    CHECK(run_cli({"train"}).code == kExitUsage);
    CHECK(run_cli({"frobnicate"}).code == kExitUsage);
    CHECK(run_cli({"uat-fit", "--function", "tan"}).code == kExitUsage);
    const Cli help = run_cli({"--help"});
    CHECK(help.code == kExitOk);
    CHECK(help.out.find("experiment") != std::string::npos);
  }
  SUBCASE("runtime errors exit 2") {
    const Cli missing = run_cli({"stats", "--corpus", tmp / "absent.jsonl"});
    CHECK(missing.code == kExitRuntime);
    CHECK(missing.err.find("absent.jsonl") != std::string::npos);
  }
  SUBCASE("synth, stats, train, eval and decompose") {
    const std::string corpus = tmp / "c.jsonl", ck = tmp / "ck.bin";
    REQUIRE(run_cli({"synth", "--out", corpus, "--count", "6", "--min-length", "5", "--max-length", "8",
                     "--seed", "3"})
                .code == kExitOk);
    CHECK(load_records(corpus) == synth_corpus(3, 6, 5, 8));
    const Cli stats = run_cli({"stats", "--corpus", corpus});
    CHECK(stats.code == kExitOk);
    CHECK(nlohmann::json::parse(stats.out).at("count") == 6);

    const Cli trained = run_cli({"train", "--corpus", corpus, "--out", ck, "--d-model", "8", "--heads", "2",
                                 "--layers", "1", "--epochs", "2", "--trace", tmp / "trace.csv", "--quiet"});
    REQUIRE(trained.code == kExitOk);
    CHECK(slurp(tmp / "trace.csv").rfind("epoch,mean_loss,seconds\n", 0) == 0);

    const Cli ev = run_cli({"eval", "--model", ck, "--corpus", corpus, "--report", tmp / "r.json"});
    CHECK(ev.code == kExitOk);
    CHECK(ev.out.find("N 6") != std::string::npos);
    CHECK(nlohmann::json::parse(slurp(tmp / "r.json")).at("N") == 6);

    MemoryRecord foreign;
    foreign.cue = "poet-0";
    foreign.content = "\xE6\x9C\x88\xE5\x85\x89";
    save_records(tmp / "foreign.jsonl", {foreign});
    const Cli mismatch = run_cli({"eval", "--model", ck, "--corpus", tmp / "foreign.jsonl"});
    CHECK(mismatch.code == kExitRuntime);
    CHECK(mismatch.err.find("unknown character") != std::string::npos);

    const Cli dec = run_cli({"decompose", "--model", ck, "--text", "poet-1", "--cue"});
    CHECK(dec.code == kExitOk);
    CHECK(dec.out.find("layer 0 attention") != std::string::npos);
    CHECK(dec.out.find("relative residual") != std::string::npos);
    const Cli dec_json = run_cli({"decompose", "--model", ck, "--text", "poet", "--json"});
    CHECK(nlohmann::json::parse(dec_json.out).at("relative_residual").get<double>() < 1e-10);
  }
  SUBCASE("gradcheck and uat-fit") {
    const Cli g = run_cli({"gradcheck", "--d-model", "8", "--layers", "1", "--seq-len", "4", "--seed", "2"});
    CHECK(g.code == kExitOk);
    CHECK(g.out.find("max relative error") != std::string::npos);
    const Cli u = run_cli({"uat-fit", "--hidden", "4", "--iterations", "50", "--out", tmp / "uat.json"});
    CHECK(u.code == kExitOk);
    CHECK(nlohmann::json::parse(slurp(tmp / "uat.json")).at("N") == 4);
  }
  SUBCASE("experiment writes the summary") {
    auto doc = tiny_config_doc();
    doc["models"].erase(1);
    doc["train"]["epochs"] = 1;
    {
      std::ofstream f(tmp / "exp.json");
      f << doc.dump();
    }
    const Cli e = run_cli({"experiment", "--config", tmp / "exp.json", "--out", tmp / "run"});
    CHECK(e.code == kExitOk);
    CHECK(fs::exists(tmp / "run/summary.json"));
    CHECK(fs::exists(tmp / "run/summary.csv"));
    CHECK(e.out.find("wide") != std::string::npos);
    CHECK(run_cli({"experiment", "--config", tmp / "exp.json"}).code == kExitRuntime);  // no output directory
  }
}
