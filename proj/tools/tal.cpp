// Command-line front end: train, attack, eval, diagnose, report, plus
// gen-data and experiment.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "tal/attack.hpp"
#include "tal/data.hpp"
#include "tal/harness.hpp"
#include "tal/io.hpp"
#include "tal/train.hpp"

namespace fs = std::filesystem;
using namespace tal;

namespace {

// Attack settings shared by `attack` and `experiment`. CLI values override
// the config file, which overrides defaults.
struct AttackFlags {
  std::string config_file;
  std::map<std::string, std::string> values;

  void add(CLI::App* app) {
    app->add_option("--config", config_file, "key = value settings file");
    for (const char* key :
         {"eps", "step", "iters", "batch-size", "loss", "temperature", "variant", "mix-prob",
          "alpha-max", "shuffle", "mix-hooks", "recompute-features", "mi", "ti", "ti-kernel",
          "di-prob", "vt-n", "vt-beta", "si-m", "admix-m1", "admix-m2", "admix-eta",
          "differentiate-factor", "reuse-alpha"}) {
      app->add_option(std::string("--") + key, values[key]);
    }
  }

  std::map<std::string, std::string> merged() const {
    std::map<std::string, std::string> out;
    if (!config_file.empty()) {
      out = read_config_file(config_file);
    }
    for (const auto& [k, v] : values) {
      if (!v.empty()) out[k] = v;
    }
    return out;
  }

  // Every setting except the method-owned loss.
  AttackConfig base() const {
    AttackConfig cfg;
    for (const auto& [k, v] : merged()) {
      if (k != "loss" && k != "method" && k != "seed") apply_setting(cfg, k, v);
    }
    return cfg;
  }

  // Settings after the method (the method may set the loss and mixing).
  AttackConfig resolve(const std::string& method, std::uint64_t seed) const {
    const auto merged = this->merged();
    const AttackConfig base = this->base();
    std::string m = method;
    if (m.empty() && merged.count("method")) m = merged.at("method");
    if (m.empty()) m = "TFM-RDI+NCE";
    AttackConfig cfg = parse_method(m, base);
    if (merged.count("loss")) apply_setting(cfg, "loss", merged.at("loss"));
    if (!cfg.mixing && (merged.count("variant") || merged.count("mix-prob"))) {
      throw ConfigError("mixing settings given for a method without CFM/TFM");
    }
    cfg.seed = seed;
    cfg.validate();
    return cfg;
  }
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s + ",") {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  return out;
}

NamedModel load_named(const std::string& path) {
  return {fs::path(path).stem().string(), std::make_shared<Model<float>>(load_weights(path))};
}

LabeledDataset load_attack_set(const std::string& path, std::size_t limit, std::uint64_t seed) {
  auto d = load_dataset(path);
  if (limit > 0 && limit < d.size()) {
    d = d.slice(0, limit);
  }
  if (d.targets.empty()) {
    d = assign_targets(std::move(d), TargetPolicy::UniformExcludingTrue, seed);
  }
  return d;
}

std::string adv_sidecar(const std::string& adv) { return adv + ".json"; }

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transferable targeted attack laboratory"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Write a procedural shapes10 set");
  std::size_t gen_count = 1000;
  std::uint64_t gen_seed = 0;
  std::string gen_out, gen_format = "cifar10-binary";
  gen->add_option("--count", gen_count);
  gen->add_option("--seed", gen_seed);
  gen->add_option("--out", gen_out)->required();
  gen->add_option("--format", gen_format)->check(CLI::IsMember({"cifar10-binary", "image-directory"}));

  // train
  auto* train = app.add_subcommand("train", "Train a zoo architecture");
  std::string tr_arch, tr_data, tr_out, tr_val;
  TrainOptions tr_opts;
  train->add_option("--arch", tr_arch)->required()->check(CLI::IsMember(zoo_names()));
  train->add_option("--data", tr_data)->required();
  train->add_option("--val", tr_val);
  train->add_option("--out", tr_out)->required();
  train->add_option("--seed", tr_opts.seed);
  train->add_option("--epochs", tr_opts.epochs);
  train->add_option("--lr", tr_opts.lr);
  train->add_option("--batch-size", tr_opts.batch_size);

  // attack
  auto* attack = app.add_subcommand("attack", "Craft adversarial examples on a source model");
  std::string at_source, at_method, at_data, at_out, at_trace;
  std::uint64_t at_seed = 0;
  std::size_t at_limit = 0;
  AttackFlags at_flags;
  attack->add_option("--source", at_source)->required();
  attack->add_option("--method", at_method, "e.g. TFM-RDI+NCE");
  attack->add_option("--data", at_data)->required();
  attack->add_option("--images", at_limit, "attack only the first N images");
  attack->add_option("--seed", at_seed);
  attack->add_option("--out", at_out)->required();
  attack->add_option("--trace", at_trace, "per-iteration CSV");
  at_flags.add(attack);

  // eval
  auto* eval = app.add_subcommand("eval", "Score an adversarial batch on target models");
  std::string ev_adv, ev_targets, ev_report;
  eval->add_option("--adv", ev_adv)->required();
  eval->add_option("--targets", ev_targets)->required();
  eval->add_option("--report", ev_report)->required();

  // diagnose
  auto* diag = app.add_subcommand("diagnose", "Clean-logit density tables per model");
  std::string dg_models, dg_data, dg_out;
  diag->add_option("--models", dg_models)->required();
  diag->add_option("--data", dg_data)->required();
  diag->add_option("--out", dg_out)->required();

  // report
  auto* rep = app.add_subcommand("report", "Merge report CSVs from a directory");
  std::string rp_grid, rp_format = "csv", rp_out;
  rep->add_option("--grid", rp_grid)->required();
  rep->add_option("--format", rp_format)->check(CLI::IsMember({"csv", "json"}));
  rep->add_option("--out", rp_out, "default: stdout");

  // experiment
  auto* exp = app.add_subcommand("experiment", "Sources × methods × targets grid");
  std::string ex_sources, ex_targets, ex_methods, ex_data, ex_out;
  std::uint64_t ex_seed = 0;
  std::size_t ex_limit = 0, ex_threads = 0;
  AttackFlags ex_flags;
  exp->add_option("--sources", ex_sources)->required();
  exp->add_option("--targets", ex_targets)->required();
  exp->add_option("--methods", ex_methods)->required();
  exp->add_option("--data", ex_data)->required();
  exp->add_option("--images", ex_limit);
  exp->add_option("--seed", ex_seed);
  exp->add_option("--threads", ex_threads, "default: TAL_THREADS or 1");
  exp->add_option("--out", ex_out, "output stem")->required();
  ex_flags.add(exp);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      auto d = make_shapes_dataset(gen_count, gen_seed);
      if (gen_format == "cifar10-binary") {
        save_cifar10_binary(d, gen_out);
      } else {
        save_image_directory(d, gen_out);
      }
      std::cout << "wrote " << d.size() << " images to " << gen_out << '\n';
    } else if (*train) {
      const auto data = load_dataset(tr_data);
      std::optional<LabeledDataset> val;
      if (!tr_val.empty()) val = load_dataset(tr_val);
      auto res = train_model(zoo_architecture(tr_arch, data.num_classes), data, tr_opts,
                             val ? &*val : nullptr, [](const EpochStats& e) {
                               std::printf("epoch %zu loss %.4f acc %.1f%%\n", e.epoch + 1, e.loss,
                                           e.train_accuracy);
                               std::fflush(stdout);
                             });
      save_weights(res.model, tr_out);
      std::printf("train accuracy %.2f%%", res.report.train_accuracy);
      if (res.report.val_accuracy >= 0) std::printf(", val accuracy %.2f%%", res.report.val_accuracy);
      std::printf("\nwrote %s\n", tr_out.c_str());
    } else if (*attack) {
      const auto src = load_named(at_source);
      const auto data = load_attack_set(at_data, at_limit, at_seed);
      const AttackConfig cfg = at_flags.resolve(at_method, at_seed);
      const auto res = run_attack(*src.model, data.images, data.targets, cfg);
      save_batch({res.adversarial, data.targets}, at_out);
      if (!at_trace.empty()) {
        std::ofstream os(at_trace);
        write_trace_csv(os, res.trace);
      }
      const std::string method = at_method.empty() ? "TFM-RDI+NCE" : at_method;
      nlohmann::json meta{{"source", src.name},
                          {"method", method},
                          {"config_hash", fnv_hex(describe(cfg))},
                          {"seed", at_seed}};
      std::ofstream(adv_sidecar(at_out)) << meta.dump(2) << '\n';
      const auto& last = res.trace.back();
      std::printf("white-box success %.2f%% after %zu iterations; wrote %s\n",
                  100.0 * static_cast<double>(last.whitebox_target_hits) /
                      static_cast<double>(res.samples),
                  last.iter, at_out.c_str());
      if (res.degenerate_calibrations > 0) {
        std::fprintf(stderr, "warning: %zu degenerate calibrations fell back to divisor 1\n",
                     res.degenerate_calibrations);
      }
      if (res.admix_fallbacks > 0) {
        std::fprintf(stderr, "warning: Admix fell back to unmixed copies %zu times\n",
                     res.admix_fallbacks);
      }
    } else if (*eval) {
      const auto batch = load_batch(ev_adv);
      std::string source = "unknown", method = "unknown";
      if (fs::exists(adv_sidecar(ev_adv))) {
        std::ifstream is(adv_sidecar(ev_adv));
        const auto meta = nlohmann::json::parse(is);
        source = meta.value("source", source);
        method = meta.value("method", method);
      }
      AttackReport report;
      report.images = batch.targets.size();
      for (const auto& path : split_list(ev_targets)) {
        const auto t = load_named(path);
        CellResult c{source, method, t.name, 0.0, true, {}};
        try {
          c.success_rate = targeted_success_rate(*t.model, batch.images, batch.targets);
        } catch (const std::exception& e) {
          c.ok = false;
          c.error = e.what();
        }
        std::printf("%s: %.2f%%\n", t.name.c_str(), c.success_rate);
        report.cells.push_back(std::move(c));
      }
      std::ofstream os(ev_report);
      write_report_csv(os, report);
    } else if (*diag) {
      const auto data = load_dataset(dg_data);
      std::vector<NamedModel> models;
      for (const auto& p : split_list(dg_models)) models.push_back(load_named(p));
      const auto tables = diagnose_densities(models, data);
      const fs::path out(dg_out);
      for (const auto& m : models) {
        fs::path path = out;
        if (models.size() > 1) {
          path = out.parent_path() / (out.stem().string() + "." + m.name + out.extension().string());
        }
        std::ofstream os(path);
        write_density_csv(os, tables.at(m.name));
        std::printf("%s: %zu rows -> %s\n", m.name.c_str(), tables.at(m.name).size(),
                    path.c_str());
      }
    } else if (*rep) {
      const auto merged = merge_reports(rp_grid);
      std::ofstream file;
      if (!rp_out.empty()) file.open(rp_out);
      std::ostream& os = rp_out.empty() ? std::cout : file;
      if (rp_format == "csv") {
        write_report_csv(os, merged);
      } else {
        write_report_json(os, merged);
      }
    } else if (*exp) {
      const auto data = load_attack_set(ex_data, ex_limit, ex_seed);
      std::vector<NamedModel> sources, targets;
      std::map<std::string, NamedModel> cache;
      auto get = [&](const std::string& p) {
        if (!cache.count(p)) cache.emplace(p, load_named(p));
        return cache.at(p);
      };
      for (const auto& p : split_list(ex_sources)) sources.push_back(get(p));
      for (const auto& p : split_list(ex_targets)) targets.push_back(get(p));
      const auto methods = split_list(ex_methods);
      const auto report = run_experiment(sources, methods, targets, data, ex_flags.base(),
                                         {ex_seed, ex_threads});
      {
        std::ofstream os(ex_out + ".csv");
        write_report_csv(os, report);
      }
      {
        std::ofstream os(ex_out + ".json");
        write_report_json(os, report);
      }
      {
        std::ofstream os(ex_out + ".curves.csv");
        write_curves_csv(os, report);
      }
      write_report_csv(std::cout, report);
    }
  } catch (const tal::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
