#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cab/checkpoint.hpp"
#include "cab/cli.hpp"
#include "cab/errors.hpp"
#include "doctest.h"

using namespace cab;
using namespace cab::cli;
using nlohmann::json;

namespace {

struct Invocation {
  int code = -1;
  std::string out;
  std::string err;
};

Invocation invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "cab");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Invocation r;
  r.code = cab::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("cab_test_cli_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::vector<json> json_lines(const std::string& text) {
  std::vector<json> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

const std::vector<std::string> kSmallModel{"--d-model", "16", "--heads", "4", "--temporal-heads", "2",
                                           "--blocks", "1", "--epochs", "2"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("ablation presets configure the mixture as named") {
  ModelConfig base;
  base.d_model = 16;
  base.heads = 4;
  base.temporal_heads = 2;

  const ModelConfig pure = apply_ablation(base, Ablation::pure);
  CHECK(pure.temporal_heads == 0);
  CHECK(pure.cab.beta() == 0.0);
  CHECK_FALSE(pure.cab.filtering);
  ModelParams p = init_model(pure, 1);
  for (const Param& prm : p.set) {
    if (prm.name.find("beta_raw") != std::string::npos) CHECK_FALSE(prm.trainable);
    if (prm.name.find("lambda_raw") != std::string::npos) CHECK_FALSE(prm.trainable);
  }

  const ModelConfig fixed = apply_ablation(base, Ablation::static_mix);
  CHECK(fixed.cab.lambda() == 0.5);
  CHECK(fixed.cab.beta() == 0.5);
  CHECK(fixed.cab.lambda_mode == LambdaMode::fixed);
  CHECK_FALSE(fixed.learn_beta);

  const ModelConfig lam = apply_ablation(base, Ablation::lambda_only);
  CHECK(lam.cab.lambda_mode == LambdaMode::learnable);
  CHECK_FALSE(lam.learn_beta);
  CHECK(lam.cab.beta() == 0.5);

  const ModelConfig beta = apply_ablation(base, Ablation::beta_only);
  CHECK(beta.cab.lambda_mode == LambdaMode::fixed);
  CHECK(beta.cab.lambda() == 0.5);
  CHECK(beta.learn_beta);

  CHECK(apply_ablation(base, Ablation::baseline) == base);
  for (Ablation a : all_ablations()) CHECK(parse_ablation(ablation_name(a)) == a);
  CHECK(parse_ablation("none") == Ablation::baseline);
  CHECK_THROWS_AS(parse_ablation("everything"), ConfigError);
}

TEST_CASE("config hash is deterministic and sensitive to every part of the run") {
  RunConfig a;
  a.data = "toy";
  RunConfig b = a;
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 16);
  b.train.lr = 2e-3;
  CHECK(config_hash(a) != config_hash(b));
  b = a;
  b.model.temporal_heads = 3;
  CHECK(config_hash(a) != config_hash(b));
  b = a;
  b.ablation = Ablation::pure;
  CHECK(run_id(a) != run_id(b));
  b = a;
  b.data = "other";
  CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("config files become flags with dashes and skip comments") {
  const auto dir = fresh_dir("cfgargs");
  std::ofstream(dir / "a.cfg") << "# comment\n\nd_model = 16\n  heads=4\n--lr = 0.01\n";
  CHECK(read_config_args(dir / "a.cfg") ==
        std::vector<std::string>{"--d-model=16", "--heads=4", "--lr=0.01"});
  std::ofstream(dir / "bad.cfg") << "d_model 16\n";
  CHECK_THROWS_AS(read_config_args(dir / "bad.cfg"), ParseError);
  CHECK_THROWS_AS(read_config_args(dir / "none.cfg"), FileError);
}

TEST_CASE("gen-data writes three splits with the requested hidden count") {
  const auto dir = fresh_dir("gen");
  const auto r = invoke({"gen-data", "--task", "imputation", "--out", "toy", "--t", "96", "--d", "8",
                         "--samples", "10", "--mask-ratio", "0.25", "--lags", "0:1:7@0.8",
                         "--seed", "1", "--out-dir", dir.string()});
  REQUIRE(r.code == 0);
  const auto rec = json_lines(r.out).at(0);
  CHECK(rec["hidden_per_sample"] == 192);
  const DatasetSplits splits = read_splits(dir / "toy");
  CHECK(splits.train.samples.size() == 6);
  CHECK(splits.val.samples.size() == 2);
  CHECK(splits.test.samples.size() == 2);
  for (const Dataset* d : {&splits.train, &splits.val, &splits.test}) {
    for (const SeriesSample& s : d->samples) {
      REQUIRE(s.mask.has_value());
      std::size_t hidden = 0;
      for (double m : s.mask->values()) hidden += m == 0.0;
      CHECK(hidden == 192);
    }
  }

  // Same arguments, same bytes.
  const auto first = slurp(dir / "toy.train");
  REQUIRE(invoke({"gen-data", "--task", "imputation", "--out", "toy", "--t", "96", "--d", "8",
                  "--samples", "10", "--lags", "0:1:7@0.8", "--seed", "1", "--out-dir", dir.string()})
              .code == 0);
  CHECK(slurp(dir / "toy.train") == first);
}

TEST_CASE("usage errors name the flag and exit with 2") {
  auto r = invoke({"gen-data", "--out", "x"});
  CHECK(r.code == kUsage);
  CHECK(r.err.find("--task") != std::string::npos);
  CHECK(r.err.find("Usage") != std::string::npos);

  r = invoke({"gen-data", "--task", "imputation", "--out", "x", "--lags", "0:1:500"});
  CHECK(r.code == kUsage);
  CHECK(r.err.find("--lags") != std::string::npos);

  r = invoke({"gen-data", "--task", "imputation", "--out", "x", "--lags", "0:1"});
  CHECK(r.code == kUsage);
  CHECK(r.err.find("--lags") != std::string::npos);

  r = invoke({"gen-data", "--task", "imputation", "--out", "x", "--mask-ratio", "0"});
  CHECK(r.code == kUsage);
  CHECK(r.err.find("--mask-ratio") != std::string::npos);

  r = invoke({"gen-data", "--task", "classification", "--out", "x", "--lags", "0:1:3"});
  CHECK(r.code == kUsage);

  r = invoke({"train", "--data", "x", "--cab", "maybe"});
  CHECK(r.code == kUsage);
  CHECK(r.err.find("--cab") != std::string::npos);

  r = invoke({"frobnicate"});
  CHECK(r.code == kUsage);

  r = invoke({"train", "--help"});
  CHECK(r.code == kOk);
  CHECK(r.out.find("--temporal-heads") != std::string::npos);
}

TEST_CASE("missing dataset exits with the file error code") {
  const auto dir = fresh_dir("missing");
  const auto r = invoke({"train", "--data", "absent", "--out-dir", dir.string()});
  CHECK(r.code == kFileError);
  CHECK(r.err.find("absent.train") != std::string::npos);
  CHECK(invoke({"eval", "--checkpoint", "absent.ckpt", "--data", "absent", "--out-dir", dir.string()}).code ==
        kFileError);
}

TEST_CASE("train with and without correlated heads, then eval the checkpoint") {
  const auto dir = fresh_dir("train");
  REQUIRE(invoke({"gen-data", "--task", "imputation", "--out", "toy", "--t", "32", "--d", "4",
                  "--samples", "10", "--lags", "0:1:5@1", "--out-dir", dir.string()})
              .code == 0);

  std::vector<json> summaries;
  for (const std::string cab : {"on", "off"}) {
    const auto r = invoke(with({"train", "--data", "toy", "--cab", cab, "--out-dir", dir.string(),
                                "--checkpoint", "cab_" + cab + ".ckpt"},
                               kSmallModel));
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto recs = json_lines(r.out);
    REQUIRE(recs.size() == 3);
    CHECK(recs[0]["type"] == "epoch");
    CHECK(recs[0]["epoch"] == 1);
    const json& s = recs.back();
    CHECK(s["type"] == "summary");
    CHECK(s.contains("mse"));
    CHECK(s.contains("mae"));
    CHECK(s["run_id"] == recs[0]["run_id"]);
    summaries.push_back(s);
  }
  CHECK(summaries[0]["temporal_heads"] == 2);
  CHECK(summaries[1]["temporal_heads"] == 4);
  CHECK(summaries[0]["config_hash"] != summaries[1]["config_hash"]);
  CHECK(summaries[0]["parameters"].get<int>() - summaries[1]["parameters"].get<int>() == 6);

  // Both runs appended to the shared metrics file.
  CHECK(json_lines(slurp(dir / "metrics.ndjson")).size() == 6);

  const auto e = invoke({"eval", "--checkpoint", "cab_on.ckpt", "--data", "toy", "--out-dir", dir.string()});
  REQUIRE_MESSAGE(e.code == 0, e.err);
  const json rec = json_lines(e.out).at(0);
  CHECK(rec["type"] == "eval");
  CHECK(rec["mse"].get<double>() == doctest::Approx(summaries[0]["mse"].get<double>()).epsilon(1e-12));

  // Identical invocation, identical metrics.
  const auto again = invoke(with({"train", "--data", "toy", "--out-dir", dir.string(), "--checkpoint",
                                  "again.ckpt"},
                                 kSmallModel));
  CHECK(json_lines(again.out).back()["mse"] == summaries[0]["mse"]);
  CHECK(slurp(dir / "again.ckpt") == slurp(dir / "cab_on.ckpt"));
}

TEST_CASE("command-line flags override config file values") {
  const auto dir = fresh_dir("override");
  REQUIRE(invoke({"gen-data", "--task", "imputation", "--out", "toy", "--t", "24", "--d", "3",
                  "--samples", "10", "--out-dir", dir.string()})
              .code == 0);
  std::ofstream(dir / "run.cfg") << "d_model = 16\nheads = 4\ntemporal_heads = 1\nblocks = 1\nepochs = 3\n";
  const auto r = invoke({"train", "--data", "toy", "--out-dir", dir.string(), "--config",
                         (dir / "run.cfg").string(), "--epochs", "1", "--temporal-heads", "2"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const json s = json_lines(r.out).back();
  CHECK(s["epochs_run"] == 1);
  CHECK(s["temporal_heads"] == 2);
  CHECK(s["heads"] == 4);

  const auto missing = invoke({"train", "--data", "toy", "--config", (dir / "nope.cfg").string()});
  CHECK(missing.code == kFileError);
}

TEST_CASE("anomaly and classification runs report their metrics") {
  const auto dir = fresh_dir("tasks");
  REQUIRE(invoke({"gen-data", "--task", "anomaly", "--out", "anom", "--t", "32", "--d", "3",
                  "--samples", "10", "--out-dir", dir.string()})
              .code == 0);
  auto r = invoke(with({"train", "--data", "anom", "--out-dir", dir.string()}, kSmallModel));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  json s = json_lines(r.out).back();
  for (const char* k : {"precision", "recall", "f1", "threshold"}) CHECK(s.contains(k));

  REQUIRE(invoke({"gen-data", "--task", "classification", "--out", "cls", "--t", "32", "--d", "3",
                  "--samples", "10", "--lags", "0:1:3,1:2:9", "--out-dir", dir.string()})
              .code == 0);
  r = invoke(with({"train", "--data", "cls", "--out-dir", dir.string()}, kSmallModel));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  s = json_lines(r.out).back();
  CHECK(s["accuracy"].get<double>() >= 0.0);
  CHECK(s["accuracy"].get<double>() <= 1.0);
}

TEST_CASE("ablate trains every preset and prints a comparison table") {
  const auto dir = fresh_dir("ablate");
  REQUIRE(invoke({"gen-data", "--task", "imputation", "--out", "toy", "--t", "24", "--d", "3",
                  "--samples", "10", "--out-dir", dir.string()})
              .code == 0);
  const auto r = invoke(with({"ablate", "--data", "toy", "--out-dir", dir.string()}, kSmallModel));
  REQUIRE_MESSAGE(r.code == 0, r.err);
  for (const char* name : {"baseline", "pure", "static", "lambda", "beta"})
    CHECK(r.out.find(name) != std::string::npos);
  std::size_t summaries = 0;
  for (const json& rec : json_lines(slurp(dir / "metrics.ndjson"))) summaries += rec["type"] == "summary";
  CHECK(summaries == 5);

  CHECK(invoke({"ablate", "--data", "toy", "--cab", "off", "--out-dir", dir.string()}).code == kUsage);
}

TEST_CASE("bench prints one CSV row per length with doubling ratios") {
  const auto r = invoke({"bench", "--t", "384,768,1536", "--dk", "8", "--reps", "1", "--warmup", "0"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  std::istringstream in(r.out);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 4);
  CHECK(lines[0].rfind("T,d_k,", 0) == 0);
  CHECK(lines[1].rfind("384,8,", 0) == 0);
  CHECK(lines[2].rfind("768,8,", 0) == 0);
  CHECK(lines[3].rfind("1536,8,", 0) == 0);
  CHECK(lines[1].substr(lines[1].size() - 2) == ",,");
  CHECK(lines[3].substr(lines[3].size() - 1) != ",");
}
