// Command-line front end over the C API.

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ddta/ddta.h"

namespace {

struct DataOptions {
  std::string dataset = "mnist";
  std::string dir;
  uint64_t train_limit = 10000;
  uint64_t test_limit = 2000;
};

void add_data_options(CLI::App* cmd, DataOptions& o) {
  cmd->add_option("--dataset", o.dataset, "mnist or cifar10")
      ->check(CLI::IsMember({"mnist", "cifar10"}))
      ->capture_default_str();
  cmd->add_option("--data-dir", o.dir, "dataset directory (default: $DDTA_DATA_DIR)");
  cmd->add_option("--train-limit", o.train_limit, "training images to keep, 0 for all")
      ->capture_default_str();
  cmd->add_option("--test-limit", o.test_limit, "test images to keep, 0 for all")
      ->capture_default_str();
}

int report_failure(ddta_status s, const char* what) {
  std::fprintf(stderr, "ddta %s: %s\n", what, ddta_last_error());
  return int(s);
}

#define DDTA_TRY(call, what)                            \
  do {                                                  \
    const ddta_status s_ = (call);                      \
    if (s_ != DDTA_OK) return report_failure(s_, what); \
  } while (0)

int load_data(const DataOptions& o, ddta_dataset** out) {
  DDTA_TRY(ddta_dataset_load(o.dataset.c_str(), o.dir.empty() ? nullptr : o.dir.c_str(),
                             o.train_limit, o.test_limit, out),
           "dataset");
  return 0;
}

ddta_norm norm_of(const std::string& s) {
  if (s == "l0") return DDTA_NORM_L0;
  if (s == "linf") return DDTA_NORM_LINF;
  return DDTA_NORM_L2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distillation-chain training, adversarial attacks and robustness evaluation"};
  app.set_version_flag("--version", std::string(ddta_version()));
  app.require_subcommand(1);

  DataOptions data;

  ddta_train_params tp;
  ddta_train_params_default(&tp);
  std::string preset = "desk";
  std::string out;
  auto* train = app.add_subcommand("train", "train a model on hard labels");
  add_data_options(train, data);
  train->add_option("--preset", preset, "desk or paper")
      ->check(CLI::IsMember({"desk", "paper"}))
      ->capture_default_str();
  train->add_option("--temperature", tp.temperature, "softmax temperature")->capture_default_str();
  train->add_option("--seed", tp.seed)->capture_default_str();
  train->add_option("--epochs", tp.epochs)->capture_default_str();
  train->add_option("--out", out, "checkpoint path")->required();

  std::string teacher;
  uint32_t steps = 3;
  std::string out_dir;
  auto* distill = app.add_subcommand("distill", "extend a teacher into a distillation chain");
  add_data_options(distill, data);
  distill->add_option("--teacher", teacher, "teacher checkpoint")->required();
  distill->add_option("--steps", steps, "chain length including the teacher")
      ->check(CLI::Range(2, 7))
      ->capture_default_str();
  distill->add_option("--seed", tp.seed)->capture_default_str();
  distill->add_option("--epochs", tp.epochs)->capture_default_str();
  distill->add_option("--out-dir", out_dir)->required();

  std::string model;
  std::string norm = "l2";
  std::string mode = "untargeted";
  uint64_t samples = 100;
  uint64_t attack_seed = 0;
  uint64_t workers = 1;
  uint64_t max_iterations = 0;
  double kappa = 0.0;
  auto* attack = app.add_subcommand("attack", "attack correctly classified test images");
  add_data_options(attack, data);
  attack->add_option("--model", model, "checkpoint")->required();
  attack->add_option("--norm", norm)->check(CLI::IsMember({"l0", "l2", "linf"}))->capture_default_str();
  attack->add_option("--mode", mode)
      ->check(CLI::IsMember({"targeted", "untargeted"}))
      ->capture_default_str();
  attack->add_option("--samples", samples)->capture_default_str();
  attack->add_option("--seed", attack_seed)->capture_default_str();
  attack->add_option("--kappa", kappa)->capture_default_str();
  attack->add_option("--max-iterations", max_iterations, "0 keeps the norm's default");
  attack->add_option("--workers", workers)->check(CLI::PositiveNumber)->capture_default_str();
  attack->add_option("--out", out, "per-attack CSV")->required();

  std::string models_dir;
  std::string metrics = "accuracy,confidence,sensitivity";
  auto* evaluate = app.add_subcommand("evaluate", "score every checkpoint under a directory");
  add_data_options(evaluate, data);
  evaluate->add_option("--models", models_dir, "directory searched for *.ckpt")->required();
  evaluate->add_option("--metrics", metrics)->capture_default_str();
  evaluate->add_option("--out", out, "CSV path")->required();

  std::string config;
  bool quiet = false;
  auto* experiment = app.add_subcommand("experiment", "run a full experiment from a config file");
  experiment->add_option("--config", config)->required()->check(CLI::ExistingFile);
  experiment->add_flag("--quiet", quiet, "suppress progress lines");

  std::string run_dir;
  auto* report = app.add_subcommand("report", "summarize a run and check its manifest");
  report->add_option("--run-dir", run_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  if (*train) {
    ddta_dataset* d = nullptr;
    if (int rc = load_data(data, &d)) return rc;
    ddta_model* m = nullptr;
    const ddta_status s = ddta_train_hard(d, preset.c_str(), &tp, &m);
    ddta_dataset_free(d);
    if (s != DDTA_OK) return report_failure(s, "train");
    const ddta_status w = ddta_model_save(m, out.c_str());
    ddta_model_free(m);
    if (w != DDTA_OK) return report_failure(w, "train");
    return 0;
  }

  if (*distill) {
    ddta_model* t = nullptr;
    DDTA_TRY(ddta_model_load(teacher.c_str(), &t), "distill");
    ddta_dataset* d = nullptr;
    if (int rc = load_data(data, &d)) {
      ddta_model_free(t);
      return rc;
    }
    const ddta_status s = ddta_distill(t, d, steps, &tp, out_dir.c_str());
    ddta_model_free(t);
    ddta_dataset_free(d);
    if (s != DDTA_OK) return report_failure(s, "distill");
    return 0;
  }

  if (*attack) {
    ddta_attack_params ap;
    DDTA_TRY(ddta_attack_params_default(norm_of(norm), &ap), "attack");
    ap.mode = mode == "targeted" ? DDTA_TARGETED : DDTA_UNTARGETED;
    ap.seed = attack_seed;
    ap.kappa = kappa;
    if (max_iterations > 0) ap.max_iterations = max_iterations;
    ddta_model* m = nullptr;
    DDTA_TRY(ddta_model_load(model.c_str(), &m), "attack");
    ddta_dataset* d = nullptr;
    if (int rc = load_data(data, &d)) {
      ddta_model_free(m);
      return rc;
    }
    ddta_attack_summary sum{};
    const ddta_status s = ddta_attack(m, d, &ap, samples, workers, out.c_str(), &sum);
    ddta_model_free(m);
    ddta_dataset_free(d);
    if (s != DDTA_OK) return report_failure(s, "attack");
    std::printf("attempted %llu, succeeded %llu", (unsigned long long)sum.attempted,
                (unsigned long long)sum.succeeded);
    if (!std::isnan(sum.mean_perturbation)) {
      std::printf(", mean %s %.6g, max %.6g", norm.c_str(), sum.mean_perturbation,
                  sum.max_perturbation);
    }
    std::printf("\n");
    return 0;
  }

  if (*evaluate) {
    ddta_dataset* d = nullptr;
    if (int rc = load_data(data, &d)) return rc;
    const ddta_status s = ddta_evaluate(models_dir.c_str(), d, metrics.c_str(), out.c_str());
    ddta_dataset_free(d);
    if (s != DDTA_OK) return report_failure(s, "evaluate");
    return 0;
  }

  if (*experiment) {
    DDTA_TRY(ddta_experiment(config.c_str(), quiet ? 0 : 1), "experiment");
    return 0;
  }

  if (*report) {
    size_t needed = 0;
    int intact = 0;
    DDTA_TRY(ddta_report(run_dir.c_str(), nullptr, 0, &needed, &intact), "report");
    std::vector<char> buf(needed);
    DDTA_TRY(ddta_report(run_dir.c_str(), buf.data(), buf.size(), &needed, &intact), "report");
    std::fputs(buf.data(), stdout);
    return intact ? 0 : int(DDTA_ERR_DATA);
  }
  return 1;
}
