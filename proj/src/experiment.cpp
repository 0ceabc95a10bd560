#include "ddta/experiment.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include <json.hpp>

#include "ddta/binary_io.hpp"
#include "ddta/error.hpp"
#include "ddta/rng.hpp"
#include "ddta/text.hpp"

namespace ddta {

namespace fs = std::filesystem;

const char* to_string(DatasetKind d) { return d == DatasetKind::kMnist ? "mnist" : "cifar10"; }

DatasetKind parse_dataset(const std::string& s) {
  if (s == "mnist") return DatasetKind::kMnist;
  if (s == "cifar10") return DatasetKind::kCifar10;
  throw InvalidArgument("unknown dataset '" + s + "' (expected mnist or cifar10)");
}

std::string temperature_tag(double t) { return text::num(t); }

void ExperimentConfig::validate() const {
  if (temperatures.empty()) throw InvalidArgument("temperature grid is empty");
  for (double t : temperatures) {
    if (!(t >= 1.0) || !std::isfinite(t)) {
      throw InvalidArgument("grid temperature " + text::num(t) + " is below 1");
    }
  }
  for (std::size_t i = 0; i < temperatures.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (temperature_tag(temperatures[i]) == temperature_tag(temperatures[j])) {
        throw InvalidArgument("grid lists temperature " + text::num(temperatures[i]) + " twice");
      }
    }
  }
  if (chain_length < 1 || chain_length > 7) throw InvalidArgument("chain length must be in [1, 7]");
  auto hp = training;
  hp.temperature = 1.0;
  hp.validate();
  if (train_limit == 0) throw InvalidArgument("train_limit must be positive");
  if (test_limit == 0) throw InvalidArgument("test_limit must be positive");
  for (std::size_t i = 0; i < attacks.size(); ++i) {
    attacks[i].validate();
    if (attacks[i].mode != AttackMode::kUntargeted) {
      throw InvalidArgument("robustness attacks must be untargeted");
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (attacks[j].norm == attacks[i].norm) {
        throw InvalidArgument(std::string("attack ") + to_string(attacks[i].norm) + " listed twice");
      }
    }
  }
  if (workers < 1) throw InvalidArgument("workers must be at least 1");
  if (!(sensitivity_threshold > 0.0)) throw InvalidArgument("sensitivity threshold must be positive");
  if (output_dir.empty()) throw InvalidArgument("output_dir is empty");
}

bool ExperimentConfig::operator==(const ExperimentConfig& o) const {
  return format_config(*this) == format_config(o);
}

// ---------------------------------------------------------------------------
// Config text

namespace {

constexpr std::size_t kAll = std::numeric_limits<std::size_t>::max();

struct Entry {
  std::string value;
  std::size_t line = 0;
};

[[noreturn]] void bad_value(const std::string& key, const Entry& e, const std::string& why) {
  throw InvalidArgument("config line " + std::to_string(e.line) + ": " + key + " = '" + e.value +
                        "': " + why);
}

double to_double(const std::string& key, const Entry& e) {
  double v = 0.0;
  const char* b = e.value.data();
  const char* end = b + e.value.size();
  auto [p, ec] = std::from_chars(b, end, v);
  if (ec != std::errc() || p != end) bad_value(key, e, "expected a number");
  return v;
}

std::uint64_t to_u64(const std::string& key, const Entry& e) {
  std::uint64_t v = 0;
  const char* b = e.value.data();
  const char* end = b + e.value.size();
  auto [p, ec] = std::from_chars(b, end, v);
  if (ec != std::errc() || p != end) bad_value(key, e, "expected a non-negative integer");
  return v;
}

std::size_t to_limit(const std::string& key, const Entry& e) {
  return e.value == "all" ? kAll : std::size_t(to_u64(key, e));
}

bool to_bool(const std::string& key, const Entry& e) {
  if (e.value == "true" || e.value == "yes" || e.value == "1") return true;
  if (e.value == "false" || e.value == "no" || e.value == "0") return false;
  bad_value(key, e, "expected true or false");
}

template <typename Fn>
auto wrap(const std::string& key, const Entry& e, Fn&& fn) {
  try {
    return fn(e.value);
  } catch (const InvalidArgument& ex) {
    bad_value(key, e, ex.what());
  }
}

std::string limit_text(std::size_t v) { return v == kAll ? "all" : std::to_string(v); }

}  // namespace

ExperimentConfig parse_config(std::string_view src) {
  std::map<std::string, Entry> kv;
  std::size_t lineno = 0;
  std::istringstream in{std::string(src)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = text::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw InvalidArgument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    std::string key(text::trim(line.substr(0, eq)));
    std::string value(text::trim(line.substr(eq + 1)));
    if (key.empty()) throw InvalidArgument("config line " + std::to_string(lineno) + ": empty key");
    if (const auto it = kv.find(key); it != kv.end()) {
      throw InvalidArgument("config line " + std::to_string(lineno) + ": " + key +
                            " already set on line " + std::to_string(it->second.line));
    }
    kv.emplace(std::move(key), Entry{std::move(value), lineno});
  }

  ExperimentConfig c;
  std::map<std::string, Entry> attack_keys;
  for (const auto& [key, e] : kv) {
    if (key == "dataset") {
      c.dataset = wrap(key, e, parse_dataset);
    } else if (key == "data_dir") {
      c.data_dir = e.value;
    } else if (key == "preset") {
      c.preset = wrap(key, e, parse_preset);
    } else if (key == "temperatures") {
      c.temperatures.clear();
      for (const auto& cell : text::split(e.value, ',')) {
        c.temperatures.push_back(to_double(key, Entry{cell, e.line}));
      }
    } else if (key == "chain_length") {
      c.chain_length = std::uint32_t(to_u64(key, e));
    } else if (key == "seed") {
      c.seed = to_u64(key, e);
    } else if (key == "workers") {
      c.workers = to_u64(key, e);
    } else if (key == "output_dir") {
      c.output_dir = e.value;
    } else if (key == "train_limit") {
      c.train_limit = to_limit(key, e);
    } else if (key == "test_limit") {
      c.test_limit = to_limit(key, e);
    } else if (key == "train.batch_size") {
      c.training.batch_size = to_u64(key, e);
    } else if (key == "train.learning_rate") {
      c.training.learning_rate = to_double(key, e);
    } else if (key == "train.decay") {
      c.training.decay = to_double(key, e);
    } else if (key == "train.momentum") {
      c.training.momentum = to_double(key, e);
    } else if (key == "train.epochs") {
      c.training.epochs = to_u64(key, e);
    } else if (key == "train.dropout") {
      c.training.dropout_rate = to_double(key, e);
    } else if (key == "robustness_samples") {
      c.robustness_samples = to_u64(key, e);
    } else if (key == "sensitivity.samples") {
      c.sensitivity_samples = to_limit(key, e);
    } else if (key == "sensitivity.threshold") {
      c.sensitivity_threshold = to_double(key, e);
    } else if (key == "sensitivity.temperature") {
      if (e.value == "test") {
        c.sensitivity_at = SensitivityAt::kTest;
      } else if (e.value == "training") {
        c.sensitivity_at = SensitivityAt::kTraining;
      } else {
        bad_value(key, e, "expected test or training");
      }
    } else if (key == "attacks") {
      // handled below
    } else if (key.rfind("attack.", 0) == 0) {
      attack_keys.emplace(key, e);
    } else {
      throw InvalidArgument("config line " + std::to_string(e.line) + ": unknown key '" + key + "'");
    }
  }

  std::vector<Norm> norms{Norm::kL2};
  if (const auto it = kv.find("attacks"); it != kv.end()) {
    norms.clear();
    if (it->second.value != "none" && !it->second.value.empty()) {
      for (const auto& cell : text::split(it->second.value, ',')) {
        norms.push_back(wrap("attacks", Entry{cell, it->second.line}, parse_norm));
      }
    }
  }

  c.attacks.clear();
  for (Norm n : norms) {
    const std::string prefix = std::string("attack.") + to_string(n) + ".";
    auto field = [&](const char* name) -> const Entry* {
      const auto it = attack_keys.find(prefix + name);
      if (it == attack_keys.end()) return nullptr;
      const Entry* e = &it->second;
      attack_keys.erase(it);
      return e;
    };
    AttackConfig a = AttackConfig::defaults(n);
    if (const auto* e = field("preset")) {
      if (e->value == "paper") {
        a = AttackConfig::paper(n);
      } else if (e->value != "desk") {
        bad_value(prefix + "preset", *e, "expected desk or paper");
      }
    }
    if (const auto* e = field("mode")) a.mode = wrap(prefix + "mode", *e, parse_mode);
    if (const auto* e = field("kappa")) a.kappa = to_double(prefix + "kappa", *e);
    if (const auto* e = field("learning_rate")) a.learning_rate = to_double(prefix + "learning_rate", *e);
    if (const auto* e = field("max_iterations")) a.max_iterations = to_u64(prefix + "max_iterations", *e);
    if (const auto* e = field("initial_c")) a.initial_c = to_double(prefix + "initial_c", *e);
    if (const auto* e = field("c_threshold")) a.c_threshold = to_double(prefix + "c_threshold", *e);
    if (const auto* e = field("random_starts")) a.random_starts = to_u64(prefix + "random_starts", *e);
    if (const auto* e = field("abort_early")) a.abort_early = to_bool(prefix + "abort_early", *e);
    c.attacks.push_back(a);
  }
  if (!attack_keys.empty()) {
    const auto& [key, e] = *attack_keys.begin();
    throw InvalidArgument("config line " + std::to_string(e.line) + ": '" + key +
                          "' does not name a field of an attack listed in 'attacks'");
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  const auto bytes = io::read_file(path);
  auto c = parse_config(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  const auto base = path.parent_path();
  if (!c.data_dir.empty() && c.data_dir.is_relative()) c.data_dir = base / c.data_dir;
  if (c.output_dir.is_relative()) c.output_dir = base / c.output_dir;
  return c;
}

std::string format_config(const ExperimentConfig& c) {
  std::vector<std::string> grid;
  for (double t : c.temperatures) grid.push_back(text::num(t));
  std::vector<std::string> norms;
  for (const auto& a : c.attacks) norms.push_back(to_string(a.norm));

  std::ostringstream o;
  o << "dataset = " << to_string(c.dataset) << '\n'
    << "data_dir = " << c.data_dir.string() << '\n'
    << "preset = " << to_string(c.preset) << '\n'
    << "temperatures = " << text::join(grid, ',') << '\n'
    << "chain_length = " << c.chain_length << '\n'
    << "seed = " << c.seed << '\n'
    << "workers = " << c.workers << '\n'
    << "output_dir = " << c.output_dir.string() << '\n'
    << "train_limit = " << limit_text(c.train_limit) << '\n'
    << "test_limit = " << limit_text(c.test_limit) << '\n'
    << "train.batch_size = " << c.training.batch_size << '\n'
    << "train.learning_rate = " << text::num(c.training.learning_rate) << '\n'
    << "train.decay = " << text::num(c.training.decay) << '\n'
    << "train.momentum = " << text::num(c.training.momentum) << '\n'
    << "train.epochs = " << c.training.epochs << '\n'
    << "train.dropout = " << text::num(c.training.dropout_rate) << '\n'
    << "robustness_samples = " << c.robustness_samples << '\n'
    << "sensitivity.samples = " << limit_text(c.sensitivity_samples) << '\n'
    << "sensitivity.threshold = " << text::num(c.sensitivity_threshold) << '\n'
    << "sensitivity.temperature = " << (c.sensitivity_at == SensitivityAt::kTest ? "test" : "training")
    << '\n'
    << "attacks = " << (norms.empty() ? "none" : text::join(norms, ',')) << '\n';
  for (const auto& a : c.attacks) {
    const std::string p = std::string("attack.") + to_string(a.norm) + ".";
    o << p << "mode = " << to_string(a.mode) << '\n'
      << p << "kappa = " << text::num(a.kappa) << '\n'
      << p << "learning_rate = " << text::num(a.learning_rate) << '\n'
      << p << "max_iterations = " << a.max_iterations << '\n'
      << p << "initial_c = " << text::num(a.initial_c) << '\n'
      << p << "c_threshold = " << text::num(a.c_threshold) << '\n'
      << p << "random_starts = " << a.random_starts << '\n'
      << p << "abort_early = " << (a.abort_early ? "true" : "false") << '\n';
  }
  return o.str();
}

// ---------------------------------------------------------------------------
// Hashing and manifest

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[md[i] >> 4];
    out += kHex[md[i] & 15];
  }
  return out;
}

std::string sha256_file(const fs::path& path) { return sha256_hex(io::read_file(path)); }

std::vector<ArtifactEntry> scan_artifacts(const fs::path& dir) {
  std::vector<ArtifactEntry> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir).generic_string();
    if (rel == kManifestName) continue;
    out.push_back({rel, sha256_file(e.path()), e.file_size()});
  }
  std::sort(out.begin(), out.end(),
            [](const ArtifactEntry& a, const ArtifactEntry& b) { return a.path < b.path; });
  return out;
}

std::string RunManifest::to_json() const {
  nlohmann::ordered_json j;
  j["format"] = "ddta-run-manifest";
  j["version"] = version;
  j["compiler"] = __VERSION__;
  j["started_at"] = started_at;
  j["finished_at"] = finished_at;
  j["completed"] = completed;
  j["error"] = error.empty() ? nlohmann::ordered_json() : nlohmann::ordered_json(error);
  j["config"] = config_text;
  auto arts = nlohmann::ordered_json::array();
  for (const auto& a : artifacts) {
    arts.push_back({{"path", a.path}, {"sha256", a.sha256}, {"bytes", a.bytes}});
  }
  j["artifacts"] = std::move(arts);
  j["notes"] = notes;
  return j.dump(2) + "\n";
}

RunManifest RunManifest::from_json(const std::string& text) {
  RunManifest m;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format") != "ddta-run-manifest") {
      throw FormatError(FormatErrorKind::kBadMagic, "not a run manifest");
    }
    m.version = j.at("version").get<std::string>();
    m.started_at = j.at("started_at").get<std::string>();
    m.finished_at = j.at("finished_at").get<std::string>();
    m.completed = j.at("completed").get<bool>();
    if (!j.at("error").is_null()) m.error = j.at("error").get<std::string>();
    m.config_text = j.at("config").get<std::string>();
    for (const auto& a : j.at("artifacts")) {
      m.artifacts.push_back({a.at("path").get<std::string>(), a.at("sha256").get<std::string>(),
                             a.at("bytes").get<std::uintmax_t>()});
    }
    m.notes = j.at("notes").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::kCorrupt, std::string("manifest: ") + e.what());
  }
  return m;
}

// ---------------------------------------------------------------------------
// Data

fs::path resolve_data_dir(const fs::path& dir) {
  if (!dir.empty()) return dir;
  if (const char* env = std::getenv("DDTA_DATA_DIR"); env && *env) return env;
  throw InvalidArgument("no data directory given and DDTA_DATA_DIR is not set");
}

DatasetPair load_dataset(DatasetKind kind, const fs::path& dir, SubsetLimits limits) {
  const auto root = resolve_data_dir(dir);
  return kind == DatasetKind::kMnist ? load_mnist(root, limits) : load_cifar10(root, limits);
}

const ModelRecord* ExperimentResults::find(double temperature, std::uint32_t step) const {
  const auto tag = temperature_tag(temperature);
  for (const auto& m : models) {
    if (m.step == step && temperature_tag(m.temperature) == tag) return &m;
  }
  return nullptr;
}

// ---------------------------------------------------------------------------
// Tables

namespace {

std::string opt_num(bool defined, double v) { return defined ? text::num(v) : std::string(); }

void write_text(const fs::path& path, const std::string& s) {
  fs::create_directories(path.parent_path());
  io::write_file(path, std::vector<std::uint8_t>(s.begin(), s.end()));
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

std::string accuracy_csv(const std::vector<ModelRecord>& models) {
  std::string s = "model_id,provenance,T,accuracy,confidence\n";
  for (const auto& m : models) {
    s += text::join({m.model_id, m.provenance.label(), text::num(m.temperature),
                     text::num(m.accuracy), text::num(m.confidence)}) + "\n";
  }
  return s;
}

std::string sensitivity_csv(const std::vector<ModelRecord>& models) {
  std::string s = "model_id,T,threshold,near_zero_proportion\n";
  for (const auto& m : models) {
    s += text::join({m.model_id, text::num(m.temperature), text::num(m.sensitivity.threshold),
                     text::num(m.sensitivity.near_zero_proportion)}) + "\n";
  }
  return s;
}

std::string robustness_csv(const std::vector<ModelRecord>& models) {
  std::string s = "model_id,T,norm,mode,n_samples,success_rate,mean_pert,max_pert\n";
  for (const auto& m : models) {
    for (const auto& r : m.robustness) {
      s += text::join({m.model_id, text::num(m.temperature), to_string(r.norm), to_string(r.mode),
                       std::to_string(r.attempted()), text::num(r.success_rate),
                       opt_num(r.mean_defined, r.mean), opt_num(r.mean_defined, r.max)}) + "\n";
    }
  }
  return s;
}

std::vector<std::string> emit_plot_data(const ExperimentResults& results, const fs::path& dir) {
  if (results.models.empty()) throw InvalidArgument("emit_plot_data: no model records");
  std::vector<std::string> notes;
  const auto& models = results.models;

  std::string acc_rows = "T,provenance,accuracy\n";
  std::string sens_rows = "T,provenance,near_zero_proportion\n";
  std::string conf_rows = "T,provenance,confidence\n";
  for (const auto& m : models) {
    const auto t = text::num(m.temperature);
    const auto p = m.provenance.label();
    acc_rows += text::join({t, p, text::num(m.accuracy)}) + "\n";
    sens_rows += text::join({t, p, text::num(m.sensitivity.near_zero_proportion)}) + "\n";
    conf_rows += text::join({t, p, text::num(m.confidence)}) + "\n";
  }
  write_text(dir / "accuracy_by_temperature.csv", acc_rows);
  write_text(dir / "sensitivity_by_temperature.csv", sens_rows);
  write_text(dir / "confidence_by_temperature.csv", conf_rows);

  std::string step_acc = "step,provenance,T,accuracy\n";
  for (std::uint32_t step = 1; step <= results.chain_length; ++step) {
    for (double t : results.temperatures) {
      if (const auto* m = results.find(t, step)) {
        step_acc += text::join({std::to_string(step), m->provenance.label(), text::num(t),
                            text::num(m->accuracy)}) + "\n";
      }
    }
  }
  write_text(dir / "accuracy_by_step.csv", step_acc);

  std::vector<Norm> norms;
  for (const auto& m : models) {
    for (const auto& r : m.robustness) {
      if (std::find(norms.begin(), norms.end(), r.norm) == norms.end()) norms.push_back(r.norm);
    }
  }
  if (norms.empty()) {
    notes.push_back("robustness plot data omitted: no robustness reports");
    return notes;
  }

  for (Norm n : norms) {
    auto report_of = [n](const ModelRecord& m) -> const RobustnessReport* {
      for (const auto& r : m.robustness) {
        if (r.norm == n) return &r;
      }
      return nullptr;
    };
    std::string robust_rows = "T,provenance,mean_pert,max_pert\n";
    for (const auto& m : models) {
      if (const auto* r = report_of(m)) {
        robust_rows += text::join({text::num(m.temperature), m.provenance.label(),
                            opt_num(r->mean_defined, r->mean), opt_num(r->mean_defined, r->max)}) +
                "\n";
      }
    }
    write_text(dir / (std::string("robustness_by_temperature_") + to_string(n) + ".csv"), robust_rows);

    std::string step_robust = "step,provenance,T,mean_pert\n";
    for (std::uint32_t step = 1; step <= results.chain_length; ++step) {
      double sum = 0.0;
      std::size_t defined = 0;
      std::string label = Provenance::for_chain(step, results.chain_length).label();
      for (double t : results.temperatures) {
        const auto* m = results.find(t, step);
        const auto* r = m ? report_of(*m) : nullptr;
        const bool ok = r && r->mean_defined;
        step_robust += text::join({std::to_string(step), label, text::num(t), opt_num(ok, ok ? r->mean : 0.0)}) +
                "\n";
        if (ok) {
          sum += r->mean;
          ++defined;
        }
      }
      step_robust += text::join({std::to_string(step), label, "mean",
                          opt_num(defined > 0, defined ? sum / double(defined) : 0.0)}) + "\n";
    }
    write_text(dir / (std::string("robustness_by_step_") + to_string(n) + ".csv"), step_robust);
  }
  return notes;
}

// ---------------------------------------------------------------------------
// Orchestration

namespace {

void remove_empty_dirs(const fs::path& dir) {
  std::vector<fs::path> dirs;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_directory()) dirs.push_back(e.path());
  }
  std::sort(dirs.rbegin(), dirs.rend());
  for (const auto& d : dirs) {
    if (fs::is_empty(d)) fs::remove(d);
  }
}

/// Leaves `dir` existing and empty. Only files listed by a previous run's
/// manifest are removed.
void prepare_output(const fs::path& dir) {
  if (fs::exists(dir) && !fs::is_directory(dir)) {
    throw InvalidArgument("output path " + dir.string() + " is not a directory");
  }
  fs::create_directories(dir);
  if (fs::is_empty(dir)) return;
  const auto manifest_path = dir / kManifestName;
  if (!fs::exists(manifest_path)) {
    throw InvalidArgument("output directory " + dir.string() +
                          " is not empty and holds no previous run manifest");
  }
  const auto bytes = io::read_file(manifest_path);
  const auto old = RunManifest::from_json(std::string(bytes.begin(), bytes.end()));
  std::vector<std::string> listed;
  for (const auto& a : old.artifacts) listed.push_back(a.path);
  std::sort(listed.begin(), listed.end());
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_directory()) continue;
    const auto rel = fs::relative(e.path(), dir).generic_string();
    if (rel != kManifestName && !std::binary_search(listed.begin(), listed.end(), rel)) {
      throw InvalidArgument("output directory " + dir.string() + " holds " + rel +
                            ", which the previous run manifest does not list");
    }
  }
  for (const auto& p : listed) fs::remove(dir / p);
  fs::remove(manifest_path);
  remove_empty_dirs(dir);
}

std::uint64_t attack_seed(std::uint64_t global, Norm n) {
  return rng::derive(global, 0xA77AC000ull + std::uint64_t(n));
}

}  // namespace

RunManifest run_experiment(const ExperimentConfig& config, ExperimentResults* results_out,
                           const ProgressSink& progress) {
  config.validate();
  auto say = [&](const std::string& s) {
    if (progress) progress(s);
  };
  const fs::path out = config.output_dir;
  prepare_output(out);

  RunManifest manifest;
  manifest.started_at = utc_now();
  manifest.config_text = format_config(config);
  ExperimentResults results;
  results.chain_length = config.chain_length;
  results.temperatures = config.temperatures;

  auto finalize = [&] {
    manifest.finished_at = utc_now();
    manifest.artifacts = scan_artifacts(out);
    write_text(out / kManifestName, manifest.to_json());
  };

  try {
    write_text(out / "config.txt", manifest.config_text);

    say("loading " + std::string(to_string(config.dataset)));
    const auto data = load_dataset(config.dataset, config.data_dir,
                                   {config.train_limit, config.test_limit});
    const auto spec = config.dataset == DatasetKind::kMnist ? ArchitectureSpec::mnist(config.preset)
                                                            : ArchitectureSpec::cifar10(config.preset);
    if (config.robustness_samples > data.test.size() && !config.attacks.empty()) {
      throw InvalidArgument("robustness_samples exceeds the test split size");
    }

    for (double T : config.temperatures) {
      const auto tag = temperature_tag(T);
      const fs::path model_dir = fs::path("models") / ("T" + tag);
      DistillationPlan plan;
      plan.spec = spec;
      plan.chain_length = config.chain_length;
      plan.hp = config.training;
      plan.hp.temperature = T;
      for (std::uint32_t i = 1; i <= config.chain_length; ++i) {
        plan.seeds.push_back(rng::derive(config.seed, i));
      }
      plan.checkpoint_dir = out / model_dir;
      fs::create_directories(*plan.checkpoint_dir);
      plan.on_step = [&](std::uint32_t step) {
        say("T=" + tag + " training step " + std::to_string(step) + "/" +
            std::to_string(config.chain_length));
      };
      const auto chain = run_distillation_chain(plan, data.train);

      for (std::uint32_t step = 1; step <= config.chain_length; ++step) {
        const auto& model = chain[step - 1];
        ModelRecord rec;
        rec.model_id = "T" + tag + "_step" + std::to_string(step);
        rec.temperature = T;
        rec.step = step;
        rec.provenance = model.provenance;
        rec.checkpoint = model_dir / ("step" + std::to_string(step) + ".ckpt");
        rec.accuracy = accuracy(model, data.test);
        rec.confidence = confidence(model, data.test);
        const double sens_t = config.sensitivity_at == SensitivityAt::kTest ? 1.0 : T;
        rec.sensitivity = sensitivity_profile(model, data.test, sens_t, config.sensitivity_threshold,
                                              config.sensitivity_samples, config.workers);
        rec.sensitivity.model_id = rec.model_id;
        say(rec.model_id + " accuracy " + text::num(rec.accuracy) + " near-zero " +
            text::num(rec.sensitivity.near_zero_proportion));

        for (auto cfg : config.attacks) {
          cfg.seed = attack_seed(config.seed, cfg.norm);
          say(rec.model_id + " " + to_string(cfg.norm) + " attack on " +
              std::to_string(config.robustness_samples) + " samples");
          auto rep = robustness(model, data.test, cfg, config.robustness_samples, config.workers,
                                rec.model_id);
          std::string csv = attack_csv_header() + "\n";
          for (const auto& r : rep.results) csv += attack_csv_row(r) + "\n";
          write_text(out / "attacks" / (rec.model_id + "_" + to_string(cfg.norm) + ".csv"), csv);
          say(rec.model_id + " " + to_string(cfg.norm) + " mean " +
              opt_num(rep.mean_defined, rep.mean) + " success " + text::num(rep.success_rate));
          rec.robustness.push_back(std::move(rep));
        }
        results.models.push_back(std::move(rec));
      }

      write_text(out / "accuracy.csv", accuracy_csv(results.models));
      write_text(out / "sensitivity.csv", sensitivity_csv(results.models));
      if (!config.attacks.empty()) write_text(out / "robustness.csv", robustness_csv(results.models));
    }
    if (config.attacks.empty()) manifest.notes.push_back("robustness.csv omitted: no attacks configured");

    const auto plot_notes = emit_plot_data(results, out / "plots");
    manifest.notes.insert(manifest.notes.end(), plot_notes.begin(), plot_notes.end());
    manifest.completed = true;
  } catch (const std::exception& e) {
    manifest.error = e.what();
    if (results_out) *results_out = std::move(results);
    finalize();
    throw;
  }
  finalize();
  if (results_out) *results_out = std::move(results);
  return manifest;
}

// ---------------------------------------------------------------------------
// Report

namespace {

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  const auto bytes = io::read_file(path);
  std::vector<std::vector<std::string>> rows;
  std::istringstream in{std::string(bytes.begin(), bytes.end())};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(text::split(line, ','));
  }
  return rows;
}

std::string render_table(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows) {
    width.resize(std::max(width.size(), r.size()), 0);
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  }
  std::string s;
  for (const auto& r : rows) {
    std::string line;
    for (std::size_t i = 0; i < r.size(); ++i) {
      line += r[i];
      if (i + 1 < r.size()) line += std::string(width[i] - r[i].size() + 2, ' ');
    }
    s += "  " + line + "\n";
  }
  return s;
}

}  // namespace

RunReport report_run(const fs::path& run_dir) {
  const auto manifest_path = run_dir / kManifestName;
  const auto bytes = io::read_file(manifest_path);
  const auto m = RunManifest::from_json(std::string(bytes.begin(), bytes.end()));

  RunReport rep;
  std::ostringstream o;
  o << "run " << run_dir.string() << "\n"
    << "  version " << m.version << ", started " << m.started_at << ", finished " << m.finished_at
    << "\n"
    << "  status " << (m.completed ? "completed" : "incomplete") << "\n";
  if (!m.error.empty()) o << "  error: " << m.error << "\n";
  for (const auto& n : m.notes) o << "  note: " << n << "\n";

  const auto actual = scan_artifacts(run_dir);
  std::map<std::string, const ArtifactEntry*> listed;
  for (const auto& a : m.artifacts) listed[a.path] = &a;
  std::size_t problems = 0;
  for (const auto& a : actual) {
    const auto it = listed.find(a.path);
    if (it == listed.end()) {
      o << "  unlisted file: " << a.path << "\n";
      ++problems;
    } else {
      if (!(*it->second == a)) {
        o << "  hash mismatch: " << a.path << "\n";
        ++problems;
      }
      listed.erase(it);
    }
  }
  for (const auto& [path, a] : listed) {
    o << "  missing file: " << path << "\n";
    ++problems;
  }
  rep.intact = problems == 0;
  o << "  artifacts " << m.artifacts.size() << (rep.intact ? ", all hashes match" : ", NOT intact")
    << "\n";

  for (const char* table : {"accuracy.csv", "sensitivity.csv", "robustness.csv"}) {
    const auto p = run_dir / table;
    if (!fs::exists(p)) continue;
    o << "\n" << table << "\n" << render_table(read_csv(p));
  }
  rep.text = o.str();
  return rep;
}

}  // namespace ddta
