// Copyright 2026 The atrg Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "atrg/cli.hpp"

using namespace atrg;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string sub(const std::string& name) const { return (path / name).string(); }
};

// Small, fast configuration for pipeline tests.
void write_mini_config(const std::string& path) {
  std::ofstream out(path);
  out << "# mini pipeline configuration\n"
         "seed = 11\n"
         "synth.vocab_size = 76\n"
         "synth.rare_pool_size = 64\n"
         "synth.len_min = 5\n"
         "synth.len_max = 8\n"
         "synth.noise_ratio = 0.2\n"
         "synth.eval_trigger_fraction = 0.4\n"
         "synth.n_train = 160\n"
         "synth.n_valid = 24\n"
         "synth.n_test = 60\n"
         "model.embed_dim = 48\n"
         "model.enc_layers = 2\n"
         "model.dec_layers = 2\n"
         "model.heads = 4\n"
         "model.ffn_dim = 96\n"
         "model.max_len = 16\n"
         "train.base_lr = 0.002\n"
         "train.warmup_steps = 30\n"
         "train.max_epochs = 24\n"
         "train.batch_size = 4\n"
         "train.patience = 24\n"
         "train.dropout = 0.1\n"
         "train.early_stop_metric = val_ce\n"
         "train.attr_fraction = 0.5\n"
         "perturb.positions = 0,1,2,3\n";
}

RunConfig mini_run(const std::string& config_path) {
  RunConfig run;
  run.kv = KeyValueConfig::from_file(config_path);
  return run;
}

}  // namespace

TEST_CASE("key value config parsing") {
  TempDir tmp("atrg_cli_cfg");
  auto path = tmp.sub("c.toml");
  {
    std::ofstream out(path);
    out << "# comment\n"
           "seed = 42\n"
           "train.base_lr = 0.5\n"
           "perturb.positions = 1, 2, 3\n"
           "name = hello\n";
  }
  auto cfg = KeyValueConfig::from_file(path);
  CHECK(cfg.get_int("seed", 0) == 42);
  CHECK(cfg.get_double("train.base_lr", 0.0) == 0.5);
  CHECK(cfg.get_int_list("perturb.positions", {}) == std::vector<int64_t>{1, 2, 3});
  CHECK(cfg.get_string("name", "") == "hello");
  CHECK(cfg.get_int("missing", 7) == 7);
  CHECK_THROWS_AS(cfg.get_int("name", 0), ConfigError);

  {
    std::ofstream out(path);
    out << "no equals sign here\n";
  }
  CHECK_THROWS_AS(KeyValueConfig::from_file(path), ConfigError);
  CHECK_THROWS_AS(KeyValueConfig::from_file(tmp.sub("absent.toml")), ConfigError);
}

TEST_CASE("config digests are stable and order-insensitive") {
  KeyValueConfig a, b;
  a.set("x", "1");
  a.set("y", "2");
  b.set("y", "2");
  b.set("x", "1");
  CHECK(a.digest() == b.digest());
  b.set("z", "3");
  CHECK(a.digest() != b.digest());
}

TEST_CASE("cmd_gen writes deterministic corpora") {
  TempDir tmp("atrg_cli_gen");
  auto cfg_path = tmp.sub("c.toml");
  write_mini_config(cfg_path);

  RunConfig run = mini_run(cfg_path);
  run.out_dir = tmp.sub("corpus_a");
  REQUIRE(cmd_gen(run) == 0);
  run.out_dir = tmp.sub("corpus_b");
  REQUIRE(cmd_gen(run) == 0);

  for (const char* name : {"train.tsv", "valid.tsv", "test.tsv"}) {
    CHECK(slurp(tmp.sub("corpus_a") + "/" + name) == slurp(tmp.sub("corpus_b") + "/" + name));
  }

  auto corpus = load_corpus_dir(tmp.sub("corpus_a"));
  CHECK(corpus.train.size() == 160);
  CHECK(corpus.valid.size() == 24);
  CHECK(corpus.test.size() == 60);
}

TEST_CASE("full mini pipeline end to end") {
  TempDir tmp("atrg_cli_pipeline");
  auto cfg_path = tmp.sub("c.toml");
  write_mini_config(cfg_path);
  RunConfig run = mini_run(cfg_path);
  fs::path root = tmp.path / "run";
  fs::create_directories(root);

  run.out_dir = (root / "corpus").string();
  REQUIRE(cmd_gen(run) == 0);

  run.corpus_dir = (root / "corpus").string();
  run.out_dir = (root / "base").string();
  run.mode = "ce";
  REQUIRE(cmd_train(run) == 0);
  CHECK(fs::exists(root / "base" / "model.bin"));
  CHECK(fs::exists(root / "base" / "meta.json"));
  CHECK(fs::exists(root / "base" / "metrics.jsonl"));

  // Metrics log: one JSON object per epoch with the documented keys.
  {
    std::ifstream in((root / "base" / "metrics.jsonl").string());
    std::string line;
    int64_t rows = 0;
    while (std::getline(in, line)) {
      auto j = nlohmann::json::parse(line);
      for (const char* k : {"epoch", "ce", "attr", "total", "lr", "val_metric", "wallclock"})
        REQUIRE(j.contains(k));
      ++rows;
    }
    CHECK(rows >= 1);
  }

  // CE-only fine-tune (budget-matched control).
  run.model_in = (root / "base").string();
  run.out_dir = (root / "ft_ce").string();
  run.mode = "ce";
  {
    RunConfig ft = run;
    ft.kv.set("train.max_epochs", "2");
    ft.kv.set("train.patience", "2");
    REQUIRE(cmd_finetune(ft) == 0);
  }

  // Attribution-regularized fine-tune.
  run.out_dir = (root / "ft_attr").string();
  run.mode = "ce+attr";
  {
    RunConfig ft = run;
    ft.kv.set("train.max_epochs", "2");
    ft.kv.set("train.patience", "2");
    REQUIRE(cmd_finetune(ft) == 0);
  }

  // Attribution dump from the base model.
  run.model_in = (root / "base").string();
  run.out_dir = (root / "attr_base").string();
  REQUIRE(cmd_attribute(run) == 0);
  auto dump = read_attribution_dump((root / "attr_base" / "attributions.jsonl").string());
  CHECK(dump.size() == 60);
  for (const auto& a : dump) {
    a.matrix.validate();
    CHECK(std::isfinite(a.features.source_entropy));
    CHECK(a.features.source_entropy >= 0.0);
  }

  // Perturbation curves.
  run.out_dir = (root / "perturb").string();
  REQUIRE(cmd_perturb(run) == 0);
  {
    auto csv = slurp((root / "perturb" / "curves.csv").string());
    CHECK(csv.find("position,token_kind,mean_bleu,n") != std::string::npos);
    CHECK(csv.find("unk") != std::string::npos);
    CHECK(csv.find("frequent") != std::string::npos);
  }

  // Classifier over the dump.
  run.attributions_path = (root / "attr_base" / "attributions.jsonl").string();
  run.out_dir = (root / "clf").string();
  REQUIRE(cmd_classify(run) == 0);
  {
    auto j = nlohmann::json::parse(slurp((root / "clf" / "classifier.json").string()));
    REQUIRE(j.contains("trees"));
    REQUIRE(j.contains("val_f1"));
    auto restored = GbdtClassifier::from_json(j);
    CHECK(restored.feature_count() == 4);
    CHECK(fs::exists(root / "clf" / "annotated.txt"));
    CHECK(fs::exists(root / "clf" / "annotated.jsonl"));
  }

  // Aggregate report.
  run.run_dir = root.string();
  run.out_dir = root.string();
  REQUIRE(cmd_report(run) == 0);
  auto report = nlohmann::json::parse(slurp((root / "report.json").string()));
  for (const char* k : {"hallucination_rate_before", "hallucination_rate_after", "bleu",
                        "feature_means", "curves", "corpus_digest", "seed"})
    REQUIRE(report.contains(k));
  CHECK(report["hallucination_rate_before"].is_number());
  CHECK(std::isfinite(report["hallucination_rate_before"].get<double>()));
  CHECK(report["bleu"]["before"].contains("overall"));
  CHECK(report["bleu"]["after"].contains("clean"));
  CHECK(report["curves"].contains("unk"));

  SECTION("report refuses mismatched corpus digests") {
    // Regenerate the corpus with a different seed: artifacts now disagree.
    RunConfig regen = mini_run(cfg_path);
    regen.seed_override = 99;
    regen.out_dir = (root / "corpus").string();
    REQUIRE(cmd_gen(regen) == 0);
    RunConfig rep = mini_run(cfg_path);
    rep.run_dir = root.string();
    rep.out_dir = root.string();
    CHECK_THROWS_AS(cmd_report(rep), DataError);
  }
}

TEST_CASE("commands reject missing inputs") {
  TempDir tmp("atrg_cli_missing");
  RunConfig run;
  run.corpus_dir = tmp.sub("nope");
  run.out_dir = tmp.sub("out");
  CHECK_THROWS_AS(cmd_train(run), DataError);
  run.attributions_path = tmp.sub("nope.jsonl");
  CHECK_THROWS_AS(cmd_classify(run), DataError);
  run.run_dir = tmp.sub("norun");
  CHECK_THROWS_AS(cmd_report(run), DataError);
}

#ifdef ATRG_BIN
TEST_CASE("binary exit codes and error lines") {
  TempDir tmp("atrg_cli_bin");
  std::string bin = ATRG_BIN;

  // Config error: malformed config file -> exit 2.
  auto bad_cfg = tmp.sub("bad.toml");
  {
    std::ofstream out(bad_cfg);
    out << "nonsense without equals\n";
  }
  std::string cmd = bin + " gen --config " + bad_cfg + " --out " + tmp.sub("o") +
                    " 2> " + tmp.sub("err.txt");
  int rc = std::system(cmd.c_str());
  CHECK(WEXITSTATUS(rc) == 2);
  CHECK(slurp(tmp.sub("err.txt")).find("atrg-error kind=config") != std::string::npos);

  // Data error: missing corpus -> exit 3.
  cmd = bin + " train --corpus " + tmp.sub("absent") + " --out " + tmp.sub("o2") + " 2> " +
        tmp.sub("err2.txt");
  rc = std::system(cmd.c_str());
  CHECK(WEXITSTATUS(rc) == 3);
  CHECK(slurp(tmp.sub("err2.txt")).find("kind=data") != std::string::npos);

  // Success path: tiny gen run -> exit 0.
  auto cfg_path = tmp.sub("mini.toml");
  {
    std::ofstream out(cfg_path);
    out << "seed = 3\nsynth.vocab_size = 30\nsynth.rare_pool_size = 16\n"
           "synth.n_train = 20\nsynth.n_valid = 4\nsynth.n_test = 4\n";
  }
  cmd = bin + " gen --config " + cfg_path + " --out " + tmp.sub("corpus");
  rc = std::system(cmd.c_str());
  CHECK(WEXITSTATUS(rc) == 0);
  CHECK(fs::exists(tmp.sub("corpus") + "/train.tsv"));
}
#endif
