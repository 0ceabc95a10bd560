#include "ddta/ddta.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <new>
#include <string>

#include "ddta/attacks.hpp"
#include "ddta/binary_io.hpp"
#include "ddta/dataset.hpp"
#include "ddta/distillation.hpp"
#include "ddta/error.hpp"
#include "ddta/evaluation.hpp"
#include "ddta/functional.hpp"
#include "ddta/experiment.hpp"
#include "ddta/network.hpp"
#include "ddta/parallel.hpp"
#include "ddta/rng.hpp"
#include "ddta/text.hpp"

struct ddta_model {
  ddta::TrainedModel model;
};

struct ddta_dataset {
  ddta::DatasetKind kind;
  ddta::DatasetPair data;
};

namespace {

namespace fs = std::filesystem;

thread_local std::string g_last_error;

ddta_status fail(ddta_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

template <typename Fn>
ddta_status guard(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return DDTA_OK;
  } catch (const ddta::InvalidArgument& e) {
    return fail(DDTA_ERR_INVALID_ARGUMENT, e.what());
  } catch (const ddta::ShapeError& e) {
    return fail(DDTA_ERR_INVALID_ARGUMENT, e.what());
  } catch (const ddta::FormatError& e) {
    return fail(DDTA_ERR_DATA, e.what());
  } catch (const ddta::IoError& e) {
    return fail(DDTA_ERR_DATA, e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(DDTA_ERR_DATA, e.what());
  } catch (const std::bad_alloc&) {
    return fail(DDTA_ERR_RUNTIME, "out of memory");
  } catch (const std::exception& e) {
    return fail(DDTA_ERR_RUNTIME, e.what());
  } catch (...) {
    return fail(DDTA_ERR_RUNTIME, "unknown failure");
  }
}

void require(bool ok, const char* what) {
  if (!ok) throw ddta::InvalidArgument(what);
}

std::size_t limit(uint64_t v) {
  return v == 0 ? std::numeric_limits<std::size_t>::max() : std::size_t(v);
}

ddta::TrainingHyperparameters to_hp(const ddta_train_params& p) {
  ddta::TrainingHyperparameters hp;
  hp.batch_size = p.batch_size;
  hp.learning_rate = p.learning_rate;
  hp.decay = p.decay;
  hp.momentum = p.momentum;
  hp.epochs = p.epochs;
  hp.temperature = p.temperature;
  hp.dropout_rate = p.dropout_rate;
  hp.seed = p.seed;
  return hp;
}

ddta::Norm to_norm(ddta_norm n) {
  switch (n) {
    case DDTA_NORM_L0: return ddta::Norm::kL0;
    case DDTA_NORM_L2: return ddta::Norm::kL2;
    case DDTA_NORM_LINF: return ddta::Norm::kLinf;
  }
  throw ddta::InvalidArgument("unknown norm");
}

ddta::AttackConfig to_attack(const ddta_attack_params& p) {
  ddta::AttackConfig c;
  c.norm = to_norm(p.norm);
  require(p.mode == DDTA_TARGETED || p.mode == DDTA_UNTARGETED, "unknown attack mode");
  c.mode = p.mode == DDTA_TARGETED ? ddta::AttackMode::kTargeted : ddta::AttackMode::kUntargeted;
  c.kappa = p.kappa;
  c.learning_rate = p.learning_rate;
  c.max_iterations = p.max_iterations;
  c.initial_c = p.initial_c;
  c.c_threshold = p.c_threshold;
  c.random_starts = p.random_starts;
  c.seed = p.seed;
  c.abort_early = p.abort_early != 0;
  c.validate();
  return c;
}

ddta::Tensor<float> batch_of(const ddta::TrainedModel& m, const float* images, uint64_t count) {
  ddta::Shape s = m.spec.input_shape();
  s.insert(s.begin(), std::size_t(count));
  const std::size_t n = std::size_t(count) * m.spec.input_size();
  return ddta::Tensor<float>(std::move(s), std::vector<float>(images, images + n));
}

}  // namespace

extern "C" {

const char* ddta_last_error(void) { return g_last_error.c_str(); }

const char* ddta_version(void) { return ddta::kVersion; }

ddta_status ddta_dataset_load(const char* name, const char* dir, uint64_t train_limit,
                              uint64_t test_limit, ddta_dataset** out) {
  return guard([&] {
    require(name && out, "dataset_load: null argument");
    *out = nullptr;
    const auto kind = ddta::parse_dataset(name);
    auto d = std::make_unique<ddta_dataset>();
    d->kind = kind;
    d->data = ddta::load_dataset(kind, dir ? fs::path(dir) : fs::path(),
                                 {limit(train_limit), limit(test_limit)});
    *out = d.release();
  });
}

void ddta_dataset_free(ddta_dataset* data) { delete data; }

ddta_status ddta_dataset_size(const ddta_dataset* data, ddta_split split, uint64_t* out) {
  return guard([&] {
    require(data && out, "dataset_size: null argument");
    *out = split == DDTA_SPLIT_TRAIN ? data->data.train.size() : data->data.test.size();
  });
}

ddta_status ddta_model_load(const char* path, ddta_model** out) {
  return guard([&] {
    require(path && out, "model_load: null argument");
    *out = nullptr;
    auto m = std::make_unique<ddta_model>();
    m->model = ddta::load_checkpoint(path);
    *out = m.release();
  });
}

ddta_status ddta_model_save(const ddta_model* model, const char* path) {
  return guard([&] {
    require(model && path, "model_save: null argument");
    ddta::save_checkpoint(model->model, path);
  });
}

void ddta_model_free(ddta_model* model) { delete model; }

ddta_status ddta_model_info_get(const ddta_model* model, ddta_model_info* out) {
  return guard([&] {
    require(model && out, "model_info: null argument");
    const auto& m = model->model;
    *out = {};
    out->temperature = m.temperature;
    out->classes = uint32_t(m.spec.classes);
    out->chain_step = m.provenance.step;
    out->input_size = m.spec.input_size();
    out->parameter_count = m.spec.parameter_count();
    out->seed = m.seed;
    const auto label = m.provenance.label();
    std::strncpy(out->provenance, label.c_str(), sizeof out->provenance - 1);
  });
}

ddta_status ddta_predict(const ddta_model* model, const float* images, uint64_t count,
                         double temperature, float* probabilities) {
  return guard([&] {
    require(model && images && probabilities, "predict: null argument");
    require(count > 0, "predict: empty batch");
    const auto p = ddta::predict(model->model, batch_of(model->model, images, count), temperature);
    std::copy(p.data().begin(), p.data().end(), probabilities);
  });
}

ddta_status ddta_logits(const ddta_model* model, const float* images, uint64_t count,
                        float* logits) {
  return guard([&] {
    require(model && images && logits, "logits: null argument");
    require(count > 0, "logits: empty batch");
    const auto z = ddta::logits(model->model, batch_of(model->model, images, count));
    std::copy(z.data().begin(), z.data().end(), logits);
  });
}

void ddta_train_params_default(ddta_train_params* out) {
  if (!out) return;
  const ddta::TrainingHyperparameters hp;
  *out = {hp.batch_size, hp.learning_rate, hp.decay, hp.momentum,
          hp.epochs,     hp.temperature,   hp.dropout_rate, hp.seed};
}

ddta_status ddta_train_hard(const ddta_dataset* data, const char* preset,
                            const ddta_train_params* params, ddta_model** out) {
  return guard([&] {
    require(data && preset && params && out, "train_hard: null argument");
    *out = nullptr;
    const auto p = ddta::parse_preset(preset);
    const auto spec = data->kind == ddta::DatasetKind::kMnist ? ddta::ArchitectureSpec::mnist(p)
                                                              : ddta::ArchitectureSpec::cifar10(p);
    auto m = std::make_unique<ddta_model>();
    m->model = ddta::train_hard(spec, data->data.train, to_hp(*params));
    *out = m.release();
  });
}

ddta_status ddta_distill(const ddta_model* teacher, const ddta_dataset* data,
                         uint32_t chain_length, const ddta_train_params* params,
                         const char* out_dir) {
  return guard([&] {
    require(teacher && data && params && out_dir, "distill: null argument");
    require(chain_length >= 2, "distill: chain length must be at least 2");
    ddta::DistillationPlan plan;
    plan.spec = teacher->model.spec;
    plan.chain_length = chain_length;
    plan.hp = to_hp(*params);
    plan.hp.temperature = teacher->model.temperature;
    plan.checkpoint_dir = fs::path(out_dir);
    fs::create_directories(out_dir);
    ddta::run_distillation_chain(plan, data->data.train, &teacher->model);
  });
}

ddta_status ddta_attack_params_default(ddta_norm norm, ddta_attack_params* out) {
  return guard([&] {
    require(out != nullptr, "attack_params_default: null argument");
    const auto c = ddta::AttackConfig::defaults(to_norm(norm));
    *out = {norm,        DDTA_UNTARGETED, c.kappa,         c.learning_rate, c.max_iterations,
            c.initial_c, c.c_threshold,   c.random_starts, c.seed,          c.abort_early ? 1 : 0};
  });
}

ddta_status ddta_attack(const ddta_model* model, const ddta_dataset* data,
                        const ddta_attack_params* params, uint64_t samples, uint64_t workers,
                        const char* out_csv, ddta_attack_summary* summary) {
  return guard([&] {
    require(model && data && params && out_csv, "attack: null argument");
    const auto cfg = to_attack(*params);
    const auto& m = model->model;
    const auto& test = data->data.test;
    ddta::RobustnessReport rep;
    if (cfg.mode == ddta::AttackMode::kUntargeted) {
      rep = ddta::robustness(m, test, cfg, samples, workers);
    } else {
      require(samples <= test.size(), "attack: more samples requested than test images");
      const auto z = ddta::logits(m, test.images);
      const std::size_t N = m.spec.classes;
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < test.size() && rows.size() < samples; ++i) {
        if (ddta::argmax<float>(z.data().subspan(i * N, N)) == test.targets[i]) rows.push_back(i);
      }
      std::vector<ddta::AttackResult> results(rows.size());
      ddta::parallel_for(rows.size(), workers, [&](std::size_t k) {
        const std::size_t row = rows[k];
        auto c = cfg;
        c.seed = ddta::rng::derive(cfg.seed, row);
        const auto img = test.image(row);
        ddta::Tensor<float> x(test.sample_shape(), std::vector<float>(img.begin(), img.end()));
        const std::size_t label = test.targets[row];
        results[k] = ddta::run_attack(m, x, label, (label + 1) % N, c);
        results[k].sample_index = row;
      });
      rep = ddta::summarize(std::move(results), cfg.norm, cfg.mode, {});
    }
    std::string csv = ddta::attack_csv_header() + "\n";
    for (const auto& r : rep.results) csv += ddta::attack_csv_row(r) + "\n";
    const fs::path out(out_csv);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    ddta::io::write_file(out, std::vector<std::uint8_t>(csv.begin(), csv.end()));
    if (summary) {
      summary->attempted = rep.attempted();
      summary->succeeded = rep.perturbations.size();
      const double nan = std::numeric_limits<double>::quiet_NaN();
      summary->mean_perturbation = rep.mean_defined ? rep.mean : nan;
      summary->max_perturbation = rep.mean_defined ? rep.max : nan;
    }
  });
}

ddta_status ddta_evaluate(const char* models_dir, const ddta_dataset* data, const char* metrics,
                          const char* out_csv) {
  return guard([&] {
    require(models_dir && data && metrics && out_csv, "evaluate: null argument");
    const auto wanted = ddta::text::split(metrics, ',');
    for (const auto& w : wanted) {
      require(w == "accuracy" || w == "confidence" || w == "sensitivity",
              "evaluate: metrics are accuracy, confidence, sensitivity");
    }
    const fs::path root(models_dir);
    if (!fs::is_directory(root)) throw ddta::IoError("evaluate: " + root.string() + " is not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
      if (e.is_regular_file() && e.path().extension() == ".ckpt") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ddta::IoError("evaluate: no .ckpt files under " + root.string());

    std::vector<std::string> header{"model_id", "provenance", "T"};
    for (const auto& w : wanted) header.push_back(w == "sensitivity" ? "near_zero_proportion" : w);
    std::string csv = ddta::text::join(header) + "\n";
    const auto& test = data->data.test;
    for (const auto& f : files) {
      const auto m = ddta::load_checkpoint(f);
      auto id = fs::relative(f, root).replace_extension().generic_string();
      std::vector<std::string> row{id, m.provenance.label(), ddta::text::num(m.temperature)};
      for (const auto& w : wanted) {
        if (w == "accuracy") {
          row.push_back(ddta::text::num(ddta::accuracy(m, test)));
        } else if (w == "confidence") {
          row.push_back(ddta::text::num(ddta::confidence(m, test)));
        } else {
          const auto prof = ddta::sensitivity_profile(m, test, 1.0, 1e-10, 500);
          row.push_back(ddta::text::num(prof.near_zero_proportion));
        }
      }
      csv += ddta::text::join(row) + "\n";
    }
    const fs::path out(out_csv);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    ddta::io::write_file(out, std::vector<std::uint8_t>(csv.begin(), csv.end()));
  });
}

ddta_status ddta_experiment(const char* config_path, int verbose) {
  return guard([&] {
    require(config_path != nullptr, "experiment: null argument");
    const auto cfg = ddta::load_config(config_path);
    ddta::ProgressSink sink;
    if (verbose) sink = [](const std::string& s) { std::fprintf(stderr, "%s\n", s.c_str()); };
    ddta::run_experiment(cfg, nullptr, sink);
  });
}

ddta_status ddta_report(const char* run_dir, char* buf, size_t cap, size_t* needed, int* intact) {
  return guard([&] {
    require(run_dir != nullptr, "report: null argument");
    const auto rep = ddta::report_run(run_dir);
    if (needed) *needed = rep.text.size() + 1;
    if (intact) *intact = rep.intact ? 1 : 0;
    if (buf && cap > 0) {
      const std::size_t n = std::min(cap - 1, rep.text.size());
      std::memcpy(buf, rep.text.data(), n);
      buf[n] = '\0';
    }
  });
}

}  // extern "C"
