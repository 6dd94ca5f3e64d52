#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tal/attack.hpp"
#include "tal/data.hpp"
#include "tal/loss.hpp"
#include "tal/net.hpp"

namespace tal {

/// 100·|{i : argmax f(x_i) = t_i}| / N, ties to the lowest index. Throws
/// ValueError for an empty batch.
double targeted_success_rate(const Model<float>& model, const Tensor& adversarial,
                             std::span<const std::size_t> targets, std::size_t batch_size = 100);

/// Applies a method name to `base`. Grammar: components joined by '-', an
/// optional '+loss' suffix (CLI loss names, case-insensitive; Logit when
/// absent). Components: DI, RDI, TI, MI, VT, SI, Admix, CFM, TFM, IFGSM
/// (drops the default MI and TI), TFM@<variant> (TFM with the named
/// truncation, e.g. TFM@half-rank1). E.g. "RDI+Logit", "CFM-RDI",
/// "TFM-RDI+NCE", "TFM@rank12-RDI", "VT-RDI+nce". MI and TI stay on unless
/// IFGSM is given.
AttackConfig parse_method(std::string_view method, const AttackConfig& base = {});

/// Sets one `key = value` setting. Known keys: eps, step, iters, seed,
/// batch-size, loss, temperature, variant, mix-prob, alpha-max, shuffle,
/// mix-hooks, recompute-features, mi, ti, ti-kernel, di-prob, vt-n, vt-beta,
/// si-m, admix-m1, admix-m2, admix-eta, differentiate-factor. Fractions such
/// as 16/255 are accepted for numbers. Throws ConfigError for unknown keys
/// and malformed values.
void apply_setting(AttackConfig& config, std::string_view key, std::string_view value);

/// Line-oriented `key = value` file; '#' starts a comment.
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);
double parse_number(std::string_view text);

/// Canonical text form of every field that influences an attack.
std::string describe(const AttackConfig& config);
/// 16 hex digits of FNV-1a.
std::string fnv_hex(std::string_view text);

struct NamedModel {
  std::string name;
  std::shared_ptr<const Model<float>> model;
};

struct CellResult {
  std::string source;
  std::string method;
  std::string target;
  double success_rate = 0;  // percent
  bool ok = true;
  std::string error;
};

struct MethodRun {
  std::string source;
  std::string method;
  std::vector<TraceRow> trace;
  std::size_t samples = 0;
  double wall_seconds = 0;
  bool ok = true;
  std::string error;
};

struct AttackReport {
  std::vector<CellResult> cells;  // source-major, then method, then target
  std::vector<MethodRun> runs;    // one per (source, method)
  std::string config_hash;
  std::uint64_t seed = 0;
  std::size_t images = 0;
  double wall_seconds = 0;

  const CellResult* find(std::string_view source, std::string_view method,
                         std::string_view target) const;
  /// Mean success over `targets` (skipping error cells); -1 when none.
  double average(std::string_view source, std::string_view method,
                 std::span<const std::string> targets) const;
};

struct ExperimentOptions {
  std::uint64_t seed = 0;
  /// Worker count; 0 reads TAL_THREADS (default 1).
  std::size_t threads = 0;
};

/// Every (source, method) attack runs once on `data` (targets must be
/// assigned) and is scored on every target model. A source listed among the
/// targets yields the white-box cell. Job j uses seed mix(seed, j). A failed
/// job becomes error cells; the rest of the grid continues.
AttackReport run_experiment(const std::vector<NamedModel>& sources,
                            const std::vector<std::string>& methods,
                            const std::vector<NamedModel>& targets, const LabeledDataset& data,
                            const AttackConfig& base, const ExperimentOptions& opts = {});

std::size_t worker_count(std::size_t requested);

/// `source,method,target,success_rate,status`.
void write_report_csv(std::ostream& os, const AttackReport& report);
/// {"meta": {...wall clock...}, "data": {...deterministic...}}.
void write_report_json(std::ostream& os, const AttackReport& report);
/// Curves as `source,method,iter,mean_loss,whitebox_success`.
void write_curves_csv(std::ostream& os, const AttackReport& report);

/// Reads every `*.csv` report under `dir` (header as written by
/// write_report_csv) into one report, sorted by (source, method, target).
AttackReport merge_reports(const std::filesystem::path& dir);

/// Per-model clean-logit density tables.
std::map<std::string, std::vector<DensityRow>> diagnose_densities(
    const std::vector<NamedModel>& models, const LabeledDataset& data);

} // namespace tal
