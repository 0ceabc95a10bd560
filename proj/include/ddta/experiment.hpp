#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "ddta/attacks.hpp"
#include "ddta/dataset.hpp"
#include "ddta/distillation.hpp"
#include "ddta/evaluation.hpp"
#include "ddta/network.hpp"

namespace ddta {

inline constexpr const char* kVersion = "0.1.0";

enum class DatasetKind : std::uint8_t { kMnist, kCifar10 };

const char* to_string(DatasetKind d);
DatasetKind parse_dataset(const std::string& s);

/// Temperature at which the sensitivity Jacobian is taken: the deployment
/// temperature (1) or each model's own training temperature.
enum class SensitivityAt : std::uint8_t { kTest, kTraining };

struct ExperimentConfig {
  DatasetKind dataset = DatasetKind::kMnist;
  /// Empty means $DDTA_DATA_DIR.
  std::filesystem::path data_dir;
  Preset preset = Preset::kDesk;
  std::vector<double> temperatures{1, 2, 5, 10, 20, 30, 40};
  std::uint32_t chain_length = 3;
  /// temperature and seed are overridden per model.
  TrainingHyperparameters training;
  std::size_t train_limit = 10000;
  std::size_t test_limit = 2000;
  /// One entry per attacked norm, in run order.
  std::vector<AttackConfig> attacks{AttackConfig::defaults(Norm::kL2)};
  std::size_t robustness_samples = 100;
  std::size_t sensitivity_samples = 500;
  double sensitivity_threshold = 1e-10;
  SensitivityAt sensitivity_at = SensitivityAt::kTest;
  std::size_t workers = 1;
  std::filesystem::path output_dir = "ddta-run";
  std::uint64_t seed = 1;

  void validate() const;

  bool operator==(const ExperimentConfig&) const;
};

/// Flat `key = value` text, `#` starts a comment. Unknown or repeated keys
/// are errors and report their line number.
ExperimentConfig parse_config(std::string_view text);
/// Relative data_dir and output_dir resolve against the file's directory.
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical text form; parse_config(format_config(c)) == c.
std::string format_config(const ExperimentConfig& c);

struct ModelRecord {
  std::string model_id;  // "T40_step3"
  double temperature = 1.0;
  std::uint32_t step = 1;
  Provenance provenance;
  std::filesystem::path checkpoint;  // relative to the output directory
  double accuracy = 0.0;
  double confidence = 0.0;
  SensitivityProfile sensitivity;
  std::vector<RobustnessReport> robustness;
};

struct ExperimentResults {
  std::uint32_t chain_length = 0;
  std::vector<double> temperatures;
  /// Grid-major, chain step minor.
  std::vector<ModelRecord> models;

  const ModelRecord* find(double temperature, std::uint32_t step) const;
};

struct ArtifactEntry {
  std::string path;  // relative, '/'-separated
  std::string sha256;
  std::uintmax_t bytes = 0;

  bool operator==(const ArtifactEntry&) const = default;
};

inline constexpr const char* kManifestName = "manifest.json";

struct RunManifest {
  std::string config_text;
  std::vector<ArtifactEntry> artifacts;  // sorted by path
  std::vector<std::string> notes;
  std::string started_at;
  std::string finished_at;
  std::string version = kVersion;
  bool completed = false;
  std::string error;

  std::string to_json() const;
  static RunManifest from_json(const std::string& text);
};

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Hashes every regular file under `dir` except the manifest itself.
std::vector<ArtifactEntry> scan_artifacts(const std::filesystem::path& dir);

using ProgressSink = std::function<void(const std::string&)>;

/// Trains, evaluates and attacks every (T, step) model of the grid and
/// writes checkpoints, CSV tables, plot data and manifest.json under
/// config.output_dir. On failure the manifest is still written, listing the
/// files completed so far, and the exception is rethrown.
RunManifest run_experiment(const ExperimentConfig& config, ExperimentResults* results = nullptr,
                           const ProgressSink& progress = {});

/// Writes the plot-data CSVs into `dir` and returns the notes to record in
/// the manifest (for example a table skipped for lack of data).
std::vector<std::string> emit_plot_data(const ExperimentResults& results,
                                        const std::filesystem::path& dir);

struct RunReport {
  std::string text;
  /// Every listed artifact exists with its recorded hash and nothing else
  /// is present.
  bool intact = false;
};

RunReport report_run(const std::filesystem::path& run_dir);

/// Table writers, exposed for the CLI's single-purpose subcommands.
std::string accuracy_csv(const std::vector<ModelRecord>& models);
std::string sensitivity_csv(const std::vector<ModelRecord>& models);
std::string robustness_csv(const std::vector<ModelRecord>& models);

/// Loads the split pair named by the config (limits applied).
DatasetPair load_dataset(DatasetKind kind, const std::filesystem::path& dir,
                         SubsetLimits limits);
/// `dir` itself, or $DDTA_DATA_DIR when `dir` is empty.
std::filesystem::path resolve_data_dir(const std::filesystem::path& dir);

/// Formats a temperature for identifiers: 1 -> "1", 2.5 -> "2.5".
std::string temperature_tag(double t);

}  // namespace ddta
