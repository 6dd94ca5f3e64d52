#include "tal/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace tal {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) {
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return out;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) {
    return {};
  }
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto p = s.find(sep, start);
    out.push_back(trim(s.substr(start, p - start)));
    if (p == std::string_view::npos) {
      break;
    }
    start = p + 1;
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  const auto l = lower(v);
  if (l == "1" || l == "true" || l == "on" || l == "yes") return true;
  if (l == "0" || l == "false" || l == "off" || l == "no") return false;
  throw ConfigError("setting '" + std::string(key) + "': expected a boolean, got '" +
                    std::string(v) + "'");
}

std::size_t parse_count(std::string_view key, std::string_view v) {
  const double d = parse_number(v);
  if (d < 0 || d != std::floor(d)) {
    throw ConfigError("setting '" + std::string(key) + "': expected a non-negative integer");
  }
  return static_cast<std::size_t>(d);
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

} // namespace

double targeted_success_rate(const Model<float>& model, const Tensor& adversarial,
                             std::span<const std::size_t> targets, std::size_t batch_size) {
  if (adversarial.rank() == 0 || adversarial.dim(0) == 0) {
    throw ValueError("targeted_success_rate: empty batch");
  }
  const std::size_t n = adversarial.dim(0);
  if (targets.size() != n) {
    throw ShapeError("targeted_success_rate: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " images");
  }
  std::size_t hits = 0;
  for (std::size_t b = 0; b < n; b += batch_size) {
    const std::size_t e = std::min(n, b + batch_size);
    const auto logits = model.logits(adversarial.slice_outer(b, e));
    const std::size_t k = logits.dim(1);
    for (std::size_t i = b; i < e; ++i) {
      hits += argmax(std::span<const float>(logits.ptr() + (i - b) * k, k)) == targets[i] ? 1 : 0;
    }
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(n);
}

double parse_number(std::string_view text) {
  const std::string t = trim(text);
  const auto slash = t.find('/');
  auto one = [&](const std::string& s) {
    double v = 0;
    const auto* end = s.data() + s.size();
    auto [p, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || p != end || s.empty()) {
      throw ConfigError("not a number: '" + t + "'");
    }
    return v;
  };
  if (slash == std::string::npos) {
    return one(t);
  }
  const double den = one(trim(t.substr(slash + 1)));
  if (den == 0) {
    throw ConfigError("zero denominator in '" + t + "'");
  }
  return one(trim(t.substr(0, slash))) / den;
}

namespace {

// Splits a method body on '-', keeping a variant name after "TFM@" whole
// even when it contains '-'.
std::vector<std::string> method_tokens(std::string_view body) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= body.size()) {
    std::size_t end = body.find('-', pos);
    const std::string head = lower(body.substr(pos, 4));
    if (head == "tfm@") {
      const std::string rest = lower(body.substr(pos + 4));
      std::size_t best = 0;
      for (auto v : {MixVariant::RemoveRank1, MixVariant::RemoveHalfRank1, MixVariant::RemoveRank12,
                     MixVariant::AddHalfRank1, MixVariant::AddRank1, MixVariant::Cfm}) {
        const auto name = to_string(v);
        if (rest.starts_with(name) && name.size() > best &&
            (rest.size() == name.size() || rest[name.size()] == '-')) {
          best = name.size();
        }
      }
      if (best > 0) {
        end = pos + 4 + best;
        if (end == body.size()) end = std::string_view::npos;
      }
    }
    out.emplace_back(body.substr(pos, end == std::string_view::npos ? body.size() - pos : end - pos));
    if (end == std::string_view::npos) break;
    pos = end + 1;
  }
  return out;
}

} // namespace

AttackConfig parse_method(std::string_view method, const AttackConfig& base) {
  AttackConfig c = base;
  c.loss.kind = LossKind::Logit;
  std::string_view body = method;
  if (const auto plus = method.find('+'); plus != std::string_view::npos) {
    body = method.substr(0, plus);
    c.loss.kind = parse_loss_kind(lower(trim(method.substr(plus + 1))));
  }
  if (trim(body).empty()) {
    throw ConfigError("empty method name '" + std::string(method) + "'");
  }
  c.di = c.rdi = c.vt = c.si = c.admix = false;
  c.mixing.reset();
  MixConfig mix = base.mixing.value_or(MixConfig{});
  const MixVariant tfm_variant =
      mix.variant == MixVariant::Cfm ? MixVariant::RemoveRank1 : mix.variant;
  for (const auto& tok : method_tokens(body)) {
    const auto t = lower(tok);
    if (t == "di") {
      c.di = true;
    } else if (t == "rdi") {
      c.rdi = true;
    } else if (t == "ti") {
      c.ti = true;
    } else if (t == "mi") {
      c.mi = true;
    } else if (t == "vt") {
      c.vt = true;
    } else if (t == "si") {
      c.si = true;
    } else if (t == "admix") {
      c.admix = true;
    } else if (t == "ifgsm") {
      c.mi = c.ti = false;
    } else if (t == "cfm") {
      mix.variant = MixVariant::Cfm;
      c.mixing = mix;
    } else if (t == "tfm") {
      mix.variant = tfm_variant;
      c.mixing = mix;
    } else if (t.starts_with("tfm@")) {
      mix.variant = parse_mix_variant(t.substr(4));
      if (mix.variant == MixVariant::Cfm) {
        throw ConfigError("use CFM, not TFM@cfm, in '" + std::string(method) + "'");
      }
      c.mixing = mix;
    } else {
      throw ConfigError("unknown method component '" + tok + "' in '" + std::string(method) + "'");
    }
  }
  c.validate();
  return c;
}

void apply_setting(AttackConfig& c, std::string_view key_in, std::string_view value) {
  const std::string key = lower(trim(key_in));
  const std::string v = trim(value);
  auto mix = [&]() -> MixConfig& {
    if (!c.mixing) {
      c.mixing = MixConfig{};
    }
    return *c.mixing;
  };
  if (key == "eps") c.budget.eps = parse_number(v);
  else if (key == "step") c.budget.step = parse_number(v);
  else if (key == "iters") c.budget.max_iters = parse_count(key, v);
  else if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_count(key, v));
  else if (key == "batch-size") c.batch_size = parse_count(key, v);
  else if (key == "loss") c.loss.kind = parse_loss_kind(lower(v));
  else if (key == "temperature") c.loss.temperature = parse_number(v);
  else if (key == "differentiate-factor") c.loss.differentiate_factor = parse_bool(key, v);
  else if (key == "variant") mix().variant = parse_mix_variant(lower(v));
  else if (key == "mix-prob") mix().probability = parse_number(v);
  else if (key == "alpha-max") mix().alpha_max = parse_number(v);
  else if (key == "shuffle") mix().shuffle = parse_bool(key, v);
  else if (key == "reuse-alpha") mix().reuse_alpha = parse_bool(key, v);
  else if (key == "mix-hooks") {
    mix().hooks.clear();
    for (const auto& h : split(v, ',')) {
      if (!h.empty()) mix().hooks.push_back(h);
    }
  } else if (key == "recompute-features") c.recompute_clean_features = parse_bool(key, v);
  else if (key == "mi") c.mi = parse_bool(key, v);
  else if (key == "ti") c.ti = parse_bool(key, v);
  else if (key == "ti-kernel") c.ti_kernel = parse_count(key, v);
  else if (key == "di-prob") c.di_prob = parse_number(v);
  else if (key == "vt-n") c.vt_samples = parse_count(key, v);
  else if (key == "vt-beta") c.vt_beta = parse_number(v);
  else if (key == "si-m") c.si_scales = parse_count(key, v);
  else if (key == "admix-m1") c.admix_scales = parse_count(key, v);
  else if (key == "admix-m2") c.admix_copies = parse_count(key, v);
  else if (key == "admix-eta") c.admix_eta = parse_number(v);
  else throw ConfigError("unknown setting '" + key + "'");
}

std::map<std::string, std::string> read_config_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) {
    throw ConfigError("cannot open config file " + path.string());
  }
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t no = 0;
  while (std::getline(is, line)) {
    ++no;
    if (const auto h = line.find('#'); h != std::string::npos) {
      line.erase(h);
    }
    if (trim(line).empty()) {
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos || trim(line.substr(0, eq)).empty()) {
      throw ConfigError(path.string() + ":" + std::to_string(no) + ": expected 'key = value'");
    }
    out[lower(trim(line.substr(0, eq)))] = trim(line.substr(eq + 1));
  }
  return out;
}

std::string describe(const AttackConfig& c) {
  std::ostringstream os;
  os << "eps=" << fmt(c.budget.eps) << "\nstep=" << fmt(c.budget.step)
     << "\niters=" << c.budget.max_iters << "\nmi=" << c.mi << "\nmi-decay=" << fmt(c.mi_decay)
     << "\nti=" << c.ti << "\nti-kernel=" << c.ti_kernel << "\ndi=" << c.di << "\nrdi=" << c.rdi
     << "\ndi-prob=" << fmt(c.di_prob) << "\ndi-max-scale=" << fmt(c.di_max_scale)
     << "\nrdi-scale=" << fmt(c.rdi_scale) << "\nvt=" << c.vt << "\nvt-n=" << c.vt_samples
     << "\nvt-beta=" << fmt(c.vt_beta) << "\nsi=" << c.si << "\nsi-m=" << c.si_scales
     << "\nadmix=" << c.admix << "\nadmix-m1=" << c.admix_scales
     << "\nadmix-m2=" << c.admix_copies << "\nadmix-eta=" << fmt(c.admix_eta)
     << "\nloss=" << to_string(c.loss.kind) << "\ntemperature=" << fmt(c.loss.temperature)
     << "\npopulation-std=" << c.loss.population_std
     << "\ndifferentiate-factor=" << c.loss.differentiate_factor
     << "\nrecompute-features=" << c.recompute_clean_features << "\nseed=" << c.seed
     << "\nbatch-size=" << c.batch_size << "\nmixing=" << c.mixing.has_value();
  if (c.mixing) {
    const auto& m = *c.mixing;
    os << "\nvariant=" << to_string(m.variant) << "\nmix-prob=" << fmt(m.probability)
       << "\nalpha-max=" << fmt(m.alpha_max) << "\nshuffle=" << m.shuffle
       << "\nreuse-alpha=" << m.reuse_alpha << "\nsvd-tol=" << fmt(m.svd.tol)
       << "\nsvd-iters=" << m.svd.max_iters << "\nmix-hooks=";
    for (const auto& h : m.hooks) os << h << ',';
  }
  os << '\n';
  return os.str();
}

std::string fnv_hex(std::string_view text) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << hash_name(text);
  return os.str();
}

const CellResult* AttackReport::find(std::string_view source, std::string_view method,
                                     std::string_view target) const {
  for (const auto& c : cells) {
    if (c.source == source && c.method == method && c.target == target) {
      return &c;
    }
  }
  return nullptr;
}

double AttackReport::average(std::string_view source, std::string_view method,
                             std::span<const std::string> targets) const {
  double sum = 0;
  std::size_t n = 0;
  for (const auto& t : targets) {
    if (const auto* c = find(source, method, t); c && c->ok) {
      sum += c->success_rate;
      ++n;
    }
  }
  return n ? sum / static_cast<double>(n) : -1.0;
}

std::size_t worker_count(std::size_t requested) {
  if (requested > 0) {
    return requested;
  }
  if (const char* env = std::getenv("TAL_THREADS")) {
    try {
      const auto v = parse_count("TAL_THREADS", env);
      if (v > 0) {
        return v;
      }
    } catch (const ConfigError&) {
    }
    throw ConfigError("TAL_THREADS must be a positive integer, got '" + std::string(env) + "'");
  }
  return 1;
}

AttackReport run_experiment(const std::vector<NamedModel>& sources,
                            const std::vector<std::string>& methods,
                            const std::vector<NamedModel>& targets, const LabeledDataset& data,
                            const AttackConfig& base, const ExperimentOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  data.validate();
  if (data.targets.size() != data.size()) {
    throw ConfigError("run_experiment: dataset targets are not assigned");
  }
  AttackReport report;
  report.seed = opts.seed;
  report.images = data.size();
  {
    std::ostringstream key;
    key << describe(base) << "seed=" << opts.seed << "\nimages=" << data.size() << "\nsources=";
    for (const auto& s : sources) key << s.name << ',';
    key << "\nmethods=";
    for (const auto& m : methods) key << m << ',';
    key << "\ntargets=";
    for (const auto& t : targets) key << t.name << ',';
    report.config_hash = fnv_hex(key.str());
  }

  struct Job {
    std::size_t source;
    std::size_t method;
  };
  std::vector<Job> jobs;
  for (std::size_t s = 0; s < sources.size(); ++s) {
    for (std::size_t m = 0; m < methods.size(); ++m) {
      jobs.push_back({s, m});
    }
  }
  std::vector<MethodRun> runs(jobs.size());
  std::vector<std::vector<CellResult>> cells(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t j = next++; j < jobs.size(); j = next++) {
      const auto& src = sources[jobs[j].source];
      const auto& method = methods[jobs[j].method];
      MethodRun& run = runs[j];
      run.source = src.name;
      run.method = method;
      run.samples = data.size();
      const auto start = std::chrono::steady_clock::now();
      try {
        AttackConfig cfg = parse_method(method, base);
        cfg.seed = mix_seed(opts.seed, j);
        const auto res = run_attack(*src.model, data.images, data.targets, cfg);
        run.trace = res.trace;
        for (const auto& t : targets) {
          CellResult c{src.name, method, t.name, 0.0, true, {}};
          try {
            c.success_rate = targeted_success_rate(*t.model, res.adversarial, data.targets);
          } catch (const std::exception& e) {
            c.ok = false;
            c.error = e.what();
          }
          cells[j].push_back(std::move(c));
        }
      } catch (const std::exception& e) {
        run.ok = false;
        run.error = e.what();
        for (const auto& t : targets) {
          cells[j].push_back({src.name, method, t.name, 0.0, false, e.what()});
        }
      }
      run.wall_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
  };
  const std::size_t n_workers = std::min(worker_count(opts.threads), std::max<std::size_t>(jobs.size(), 1));
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n_workers; ++i) {
      pool.emplace_back(worker);
    }
    for (auto& t : pool) {
      t.join();
    }
  }
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    report.runs.push_back(std::move(runs[j]));
    for (auto& c : cells[j]) {
      report.cells.push_back(std::move(c));
    }
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

void write_report_csv(std::ostream& os, const AttackReport& report) {
  os << "source,method,target,success_rate,status\n";
  for (const auto& c : report.cells) {
    os << c.source << ',' << c.method << ',' << c.target << ',' << std::fixed
       << std::setprecision(2) << c.success_rate << std::defaultfloat << ','
       << (c.ok ? "ok" : "error") << '\n';
  }
}

void write_report_json(std::ostream& os, const AttackReport& report) {
  using nlohmann::json;
  json cells = json::array();
  for (const auto& c : report.cells) {
    json j{{"source", c.source}, {"method", c.method}, {"target", c.target}, {"ok", c.ok}};
    if (c.ok) {
      j["success_rate"] = c.success_rate;
    } else {
      j["error"] = c.error;
    }
    cells.push_back(std::move(j));
  }
  json curves = json::array();
  json timings = json::array();
  for (const auto& r : report.runs) {
    json pts = json::array();
    for (const auto& t : r.trace) {
      pts.push_back({{"iter", t.iter},
                     {"mean_loss", t.mean_loss},
                     {"whitebox_success",
                      r.samples ? 100.0 * static_cast<double>(t.whitebox_target_hits) /
                                      static_cast<double>(r.samples)
                                : 0.0}});
    }
    json run{{"source", r.source}, {"method", r.method}, {"ok", r.ok}, {"curve", pts}};
    if (!r.ok) {
      run["error"] = r.error;
    }
    curves.push_back(std::move(run));
    timings.push_back({{"source", r.source}, {"method", r.method}, {"seconds", r.wall_seconds}});
  }
  json doc{{"meta",
            {{"config_hash", report.config_hash},
             {"seed", report.seed},
             {"wall_seconds", report.wall_seconds},
             {"run_seconds", timings}}},
           {"data",
            {{"config_hash", report.config_hash},
             {"seed", report.seed},
             {"images", report.images},
             {"cells", cells},
             {"curves", curves}}}};
  os << doc.dump(2) << '\n';
}

void write_curves_csv(std::ostream& os, const AttackReport& report) {
  os << "source,method,iter,mean_loss,whitebox_success\n";
  for (const auto& r : report.runs) {
    for (const auto& t : r.trace) {
      os << r.source << ',' << r.method << ',' << t.iter << ',' << std::setprecision(9)
         << t.mean_loss << ',' << std::setprecision(6)
         << (r.samples ? 100.0 * static_cast<double>(t.whitebox_target_hits) /
                             static_cast<double>(r.samples)
                       : 0.0)
         << '\n';
    }
  }
}

AttackReport merge_reports(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw ConfigError(dir.string() + " is not a directory");
  }
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".csv") {
      files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  AttackReport merged;
  for (const auto& f : files) {
    std::ifstream is(f);
    std::string line;
    if (!std::getline(is, line) || trim(line) != "source,method,target,success_rate,status") {
      continue;
    }
    std::size_t no = 1;
    while (std::getline(is, line)) {
      ++no;
      if (trim(line).empty()) {
        continue;
      }
      const auto cols = split(line, ',');
      if (cols.size() != 5) {
        throw FormatError(f.string() + ":" + std::to_string(no) + ": expected 5 columns");
      }
      CellResult c{cols[0], cols[1], cols[2], 0.0, cols[4] == "ok", {}};
      try {
        c.success_rate = parse_number(cols[3]);
      } catch (const ConfigError&) {
        throw FormatError(f.string() + ":" + std::to_string(no) + ": bad success rate");
      }
      merged.cells.push_back(std::move(c));
    }
  }
  std::stable_sort(merged.cells.begin(), merged.cells.end(), [](const auto& a, const auto& b) {
    return std::tie(a.source, a.method, a.target) < std::tie(b.source, b.method, b.target);
  });
  std::string key;
  for (const auto& c : merged.cells) {
    key += c.source + ',' + c.method + ',' + c.target + ',' + fmt(c.success_rate) + '\n';
  }
  merged.config_hash = fnv_hex(key);
  return merged;
}

std::map<std::string, std::vector<DensityRow>> diagnose_densities(
    const std::vector<NamedModel>& models, const LabeledDataset& data) {
  std::map<std::string, std::vector<DensityRow>> out;
  for (const auto& m : models) {
    out[m.name] = logit_density_stats(*m.model, data.images, data.labels);
  }
  return out;
}

} // namespace tal
