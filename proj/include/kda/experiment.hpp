#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "kda/dataset.hpp"
#include "kda/keyvalue.hpp"

namespace kda {

/// Invalid experiment specification. what() lists every problem found.
class SpecError : public std::invalid_argument {
 public:
  explicit SpecError(const std::vector<std::string>& problems);
  const std::vector<std::string>& problems() const noexcept { return problems_; }

 private:
  std::vector<std::string> problems_;
};

enum class AttackKind { kNone, kCwL2, kOnePixel };

std::string to_string(AttackKind a);
AttackKind parse_attack(const std::string& s);

struct ExperimentSpec {
  std::string dataset = "toy";  // toy | cifar10
  std::filesystem::path data_dir;
  std::size_t train_n = 5000;
  std::size_t test_n = 1000;
  std::size_t attack_n = 100;  // first attack_n test images are attacked

  std::vector<std::size_t> channels{3, 6, 9};  // J*I columns next to vanilla
  AttackKind attack = AttackKind::kNone;
  std::size_t pixels = 1;
  std::size_t population = 400;
  std::size_t generations = 75;
  std::size_t cw_steps = 6;
  std::size_t cw_iterations = 500;
  std::string cw_target = "vanilla";  // vanilla | surrogate

  std::filesystem::path key_path;
  std::uint64_t seed = 1;
  std::size_t epochs = 30;
  bool prefilter = true;
  double tau = 0.25;
  double flip_fraction = 1.0;
  std::size_t workers = 0;

  std::filesystem::path out = "results.csv";
  std::filesystem::path models_dir;  // reuse or cache trained models here when set

  /// Every recognised key with its current value.
  KeyValueFile to_config() const;
  /// Reads known keys; unknown keys and unparsable values are a SpecError.
  /// Cross-field checks are left to validate().
  static ExperimentSpec from_config(const KeyValueFile& kv);
  /// Throws SpecError listing every violated constraint.
  void validate() const;
};

/// Config keys understood by ExperimentSpec, in documentation order.
const std::vector<std::string>& experiment_keys();

/// J*I in {1, 3, 6, 9} to (J, I).
std::pair<std::size_t, std::size_t> channel_layout(std::size_t total);

/// Per-image OnePixel seed, so results do not depend on scheduling.
std::uint64_t attack_seed(std::uint64_t seed, std::size_t index);

/// Loads the split named by the spec (KDA_DATA_DIR is the caller's concern).
DatasetPair load_experiment_data(const ExperimentSpec& spec);

struct ResultRow {
  std::string attack;  // "none" is the clean row
  std::string config;  // "vanilla" or the J*I count
  double error_percent = 0.0;
  std::size_t n = 0;
  std::uint64_t seed = 0;
};

struct ExperimentResult {
  std::vector<ResultRow> rows;
  /// Extra measurements for the text table footer (key, value).
  std::vector<std::pair<std::string, std::string>> notes;
};

using Progress = std::function<void(const std::string&)>;

/// Trains (or loads) vanilla and KDA models, runs the attack and evaluates
/// every configuration. Deterministic in (spec, master key).
ExperimentResult run_experiment(const ExperimentSpec& spec, const Progress& progress = {});

void write_csv(std::ostream& out, const std::vector<ResultRow>& rows);
/// Aligned table: one row per attack, one column per configuration.
void write_table(std::ostream& out, const ExperimentResult& result);
/// Writes spec.out and the table next to it (same stem, .txt).
void write_results(const ExperimentSpec& spec, const ExperimentResult& result);

}  // namespace kda
