#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ddta/ddta.h"

namespace fs = std::filesystem;

// This suite sees only the C header, as an external consumer would.

namespace {

std::string data_dir() {
  const char* env = std::getenv("DDTA_DATA_DIR");
  return env && *env ? env : "/root/data/mnist";
}

bool have_mnist() { return fs::exists(fs::path(data_dir()) / "train-images-idx3-ubyte"); }

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("ddta-capi-" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

struct Fixture {
  ddta_dataset* data = nullptr;
  ddta_model* model = nullptr;

  Fixture() {
    REQUIRE(ddta_dataset_load("mnist", data_dir().c_str(), 300, 40, &data) == DDTA_OK);
    ddta_train_params p;
    ddta_train_params_default(&p);
    p.epochs = 1;
    REQUIRE(ddta_train_hard(data, "desk", &p, &model) == DDTA_OK);
  }
  ~Fixture() {
    ddta_model_free(model);
    ddta_dataset_free(data);
  }
};

}  // namespace

TEST_CASE("version and null arguments") {
  CHECK(std::string(ddta_version()) == "0.1.0");
  ddta_model* m = nullptr;
  CHECK(ddta_model_load(nullptr, &m) == DDTA_ERR_INVALID_ARGUMENT);
  CHECK(std::string(ddta_last_error()).size() > 0);
  CHECK(ddta_model_load("x", nullptr) == DDTA_ERR_INVALID_ARGUMENT);
  CHECK(ddta_model_info_get(nullptr, nullptr) == DDTA_ERR_INVALID_ARGUMENT);
  CHECK(ddta_attack_params_default(static_cast<ddta_norm>(7), nullptr) == DDTA_ERR_INVALID_ARGUMENT);
  ddta_model_free(nullptr);
  ddta_dataset_free(nullptr);
}

TEST_CASE("missing and corrupt files are data errors") {
  ddta_model* m = nullptr;
  CHECK(ddta_model_load("/nonexistent/model.ckpt", &m) == DDTA_ERR_DATA);
  CHECK(m == nullptr);
  const auto dir = scratch("corrupt");
  std::ofstream(dir / "bad.ckpt") << "DDTA but not really a checkpoint";
  CHECK(ddta_model_load((dir / "bad.ckpt").c_str(), &m) == DDTA_ERR_DATA);
  CHECK(std::string(ddta_last_error()).size() > 0);

  ddta_dataset* d = nullptr;
  CHECK(ddta_dataset_load("mnist", dir.c_str(), 0, 0, &d) == DDTA_ERR_DATA);
  CHECK(ddta_dataset_load("svhn", dir.c_str(), 0, 0, &d) == DDTA_ERR_INVALID_ARGUMENT);
}

TEST_CASE("train, inspect, predict and persist through handles") {
  if (!have_mnist()) return;
  Fixture f;
  std::uint64_t n = 0;
  CHECK(ddta_dataset_size(f.data, DDTA_SPLIT_TRAIN, &n) == DDTA_OK);
  CHECK(n == 300);
  CHECK(ddta_dataset_size(f.data, DDTA_SPLIT_TEST, &n) == DDTA_OK);
  CHECK(n == 40);

  ddta_model_info info;
  REQUIRE(ddta_model_info_get(f.model, &info) == DDTA_OK);
  CHECK(info.temperature == 1.0);
  CHECK(info.classes == 10);
  CHECK(info.chain_step == 1);
  CHECK(info.input_size == 784);
  CHECK(info.parameter_count < 200000);
  CHECK(std::string(info.provenance) == "teacher");

  std::vector<float> images(2 * 784, 0.25f);
  std::vector<float> p(20), z(20);
  REQUIRE(ddta_predict(f.model, images.data(), 2, 1.0, p.data()) == DDTA_OK);
  REQUIRE(ddta_logits(f.model, images.data(), 2, z.data()) == DDTA_OK);
  double total = 0.0;
  for (int i = 0; i < 10; ++i) total += p[i];
  CHECK(total == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(ddta_predict(f.model, images.data(), 2, 0.0, p.data()) == DDTA_ERR_INVALID_ARGUMENT);

  const auto dir = scratch("persist");
  const auto path = (dir / "m.ckpt").string();
  REQUIRE(ddta_model_save(f.model, path.c_str()) == DDTA_OK);
  ddta_model* back = nullptr;
  REQUIRE(ddta_model_load(path.c_str(), &back) == DDTA_OK);
  std::vector<float> z2(20);
  REQUIRE(ddta_logits(back, images.data(), 2, z2.data()) == DDTA_OK);
  CHECK(z2 == z);
  ddta_model_free(back);
}

TEST_CASE("distill, attack and evaluate through handles") {
  if (!have_mnist()) return;
  Fixture f;
  const auto dir = scratch("chain");
  ddta_train_params p;
  ddta_train_params_default(&p);
  p.epochs = 1;
  CHECK(ddta_distill(f.model, f.data, 1, &p, dir.c_str()) == DDTA_ERR_INVALID_ARGUMENT);
  REQUIRE(ddta_distill(f.model, f.data, 2, &p, dir.c_str()) == DDTA_OK);
  REQUIRE(fs::exists(dir / "step2.ckpt"));
  ddta_model* student = nullptr;
  REQUIRE(ddta_model_load((dir / "step2.ckpt").c_str(), &student) == DDTA_OK);
  ddta_model_info info;
  REQUIRE(ddta_model_info_get(student, &info) == DDTA_OK);
  CHECK(info.chain_step == 2);
  CHECK(std::string(info.provenance) == "student");

  ddta_attack_params ap;
  REQUIRE(ddta_attack_params_default(DDTA_NORM_L2, &ap) == DDTA_OK);
  CHECK(ap.mode == DDTA_UNTARGETED);
  ap.max_iterations = 30;
  ddta_attack_summary sum;
  const auto csv = dir / "attack.csv";
  REQUIRE(ddta_attack(student, f.data, &ap, 2, 1, csv.c_str(), &sum) == DDTA_OK);
  CHECK(sum.attempted == 2);
  CHECK(sum.succeeded <= 2);
  if (sum.succeeded == 0) CHECK(std::isnan(sum.mean_perturbation));
  CHECK(fs::file_size(csv) > 0);
  ddta_model_free(student);

  const auto table = dir / "eval.csv";
  REQUIRE(ddta_evaluate(dir.c_str(), f.data, "accuracy,confidence", table.c_str()) == DDTA_OK);
  std::ifstream in(table);
  std::string header;
  std::getline(in, header);
  CHECK(header == "model_id,provenance,T,accuracy,confidence");
  int rows = 0;
  for (std::string l; std::getline(in, l);) rows += !l.empty();
  CHECK(rows == 2);
  CHECK(ddta_evaluate(dir.c_str(), f.data, "accuracy,speed", table.c_str()) == DDTA_ERR_INVALID_ARGUMENT);
}

TEST_CASE("experiment and report buffer sizing") {
  if (!have_mnist()) return;
  const auto dir = scratch("experiment");
  std::ofstream(dir / "run.conf") << "data_dir = " << data_dir() << "\n"
                                  << "temperatures = 1\nchain_length = 1\n"
                                  << "train_limit = 200\ntest_limit = 30\ntrain.epochs = 1\n"
                                  << "sensitivity.samples = 5\nattacks = none\noutput_dir = out\n";
  REQUIRE(ddta_experiment((dir / "run.conf").c_str(), 0) == DDTA_OK);
  CHECK(ddta_experiment((dir / "nope.conf").c_str(), 0) == DDTA_ERR_DATA);

  const auto run = (dir / "out").string();
  std::size_t needed = 0;
  int intact = 0;
  REQUIRE(ddta_report(run.c_str(), nullptr, 0, &needed, &intact) == DDTA_OK);
  CHECK(needed > 1);
  CHECK(intact == 1);

  std::vector<char> small(8, 'x');
  REQUIRE(ddta_report(run.c_str(), small.data(), small.size(), &needed, &intact) == DDTA_OK);
  CHECK(std::string(small.data()).size() == 7);

  std::vector<char> full(needed);
  REQUIRE(ddta_report(run.c_str(), full.data(), full.size(), &needed, &intact) == DDTA_OK);
  CHECK(std::string(full.data()).size() == needed - 1);
}
