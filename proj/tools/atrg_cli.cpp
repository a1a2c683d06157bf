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

#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "atrg/cli.hpp"

namespace {

// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
constexpr int kConfigExit = 2;
constexpr int kDataExit = 3;
constexpr int kNumericExit = 4;

int fail(const char* kind, const std::string& msg, int code) {
  std::fprintf(stderr, "atrg-error kind=%s msg=\"%s\"\n", kind, msg.c_str());
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"atrg: hallucination diagnosis and attribution-regularized fine-tuning "
               "for a toy transformer translator"};
  app.require_subcommand(1);

  std::string config_path, corpus_dir, model_in, out_dir, attributions, run_dir;
  std::string mode = "ce";
  int64_t seed_flag = -1;
  double lambda_flag = -1.0;
  bool lambda_set = false, seed_set = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "TOML-style key = value config file");
    cmd->add_option("--seed", seed_flag, "override the run seed")
        ->each([&](const std::string&) { seed_set = true; });
    cmd->add_option("--out", out_dir, "output directory")->required();
  };

  CLI::App* gen = app.add_subcommand("gen", "generate the synthetic corpus");
  add_common(gen);

  CLI::App* train_cmd = app.add_subcommand("train", "train a model from scratch");
  add_common(train_cmd);
  train_cmd->add_option("--corpus", corpus_dir, "corpus directory")->required();
  train_cmd->add_option("--mode", mode, "objective: ce or ce+attr")
      ->check(CLI::IsMember({"ce", "ce+attr"}));
  train_cmd->add_option("--lambda", lambda_flag, "attribution loss weight")
      ->each([&](const std::string&) { lambda_set = true; });

  CLI::App* finetune = app.add_subcommand("finetune", "fine-tune a trained model");
  add_common(finetune);
  finetune->add_option("--corpus", corpus_dir, "corpus directory")->required();
  finetune->add_option("--model", model_in, "model directory to start from")->required();
  finetune->add_option("--mode", mode, "objective: ce or ce+attr")
      ->check(CLI::IsMember({"ce", "ce+attr"}));
  finetune->add_option("--lambda", lambda_flag, "attribution loss weight")
      ->each([&](const std::string&) { lambda_set = true; });

  CLI::App* attribute = app.add_subcommand("attribute", "attribution dump over the test split");
  add_common(attribute);
  attribute->add_option("--corpus", corpus_dir, "corpus directory")->required();
  attribute->add_option("--model", model_in, "model directory")->required();

  CLI::App* perturb = app.add_subcommand("perturb", "UNK/frequent-token degradation curves");
  add_common(perturb);
  perturb->add_option("--corpus", corpus_dir, "corpus directory")->required();
  perturb->add_option("--model", model_in, "model directory")->required();

  CLI::App* classify = app.add_subcommand("classify", "token-level hallucination classifier");
  add_common(classify);
  classify->add_option("--attributions", attributions, "attributions.jsonl path")->required();

  CLI::App* report = app.add_subcommand("report", "aggregate run artifacts into a summary");
  add_common(report);
  report->add_option("--run", run_dir, "run directory with corpus/, base/, ft_attr/, ...")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::fprintf(stderr, "atrg-error kind=config msg=\"%s\"\n", e.what());
    return kConfigExit;
  }

  try {
    atrg::RunConfig run;
    if (!config_path.empty()) run.kv = atrg::KeyValueConfig::from_file(config_path);
    run.corpus_dir = corpus_dir;
    run.model_in = model_in;
    run.out_dir = out_dir;
    run.attributions_path = attributions;
    run.run_dir = run_dir;
    run.mode = mode;
    if (seed_set) run.seed_override = static_cast<uint64_t>(seed_flag);
    if (lambda_set) run.lambda_override = lambda_flag;

    if (gen->parsed()) return atrg::cmd_gen(run);
    if (train_cmd->parsed()) return atrg::cmd_train(run);
    if (finetune->parsed()) return atrg::cmd_finetune(run);
    if (attribute->parsed()) return atrg::cmd_attribute(run);
    if (perturb->parsed()) return atrg::cmd_perturb(run);
    if (classify->parsed()) return atrg::cmd_classify(run);
    if (report->parsed()) return atrg::cmd_report(run);
    return fail("config", "no subcommand", kConfigExit);
  } catch (const atrg::ConfigError& e) {
    return fail("config", e.what(), kConfigExit);
  } catch (const atrg::NumericError& e) {
    return fail("numeric", e.what(), kNumericExit);
  } catch (const atrg::DataError& e) {
    return fail("data", e.what(), kDataExit);
  } catch (const atrg::Error& e) {
    return fail("error", e.what(), 1);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
}
