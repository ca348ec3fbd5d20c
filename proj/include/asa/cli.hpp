#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "asa/gradcheck.hpp"
#include "asa/pipeline.hpp"

namespace asa::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kRuntime = 2 };

/// Shortest round-trip decimal; "inf"/"-inf"/"nan" for non-finite values.
inline std::string fmt(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header) : out_(path) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
    row(header);
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

inline Dims parse_dims(const std::string& text) {
  std::vector<std::size_t> v;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    std::size_t used = 0;
    const unsigned long long x = std::stoull(part, &used);
    if (used != part.size()) throw ContractViolation("bad extent '" + part + "' in '" + text + "'");
    v.push_back(static_cast<std::size_t>(x));
  }
  if (v.size() != 3) throw ContractViolation("expected T,H,W but got '" + text + "'");
  return {v[0], v[1], v[2]};
}

inline RunConfig resolve_config(const std::string& path, const std::optional<std::uint64_t>& seed) {
  RunConfig cfg = path.empty() ? RunConfig{} : load_run_config(path);
  if (seed) cfg.seed = *seed;
  cfg.validate();
  return cfg;
}

inline void write_loss_csv(const std::filesystem::path& path, const std::vector<StepRecord>& log) {
  CsvWriter csv(path, {"step", "lr", "loss"});
  for (const auto& r : log) csv.row({std::to_string(r.step), fmt(r.lr), fmt(r.loss)});
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<ClassMetrics>& m) {
  CsvWriter csv(path, {"class", "dice", "hd95"});
  double dice = 0.0, hd = 0.0;
  for (const auto& c : m) {
    csv.row({std::to_string(c.label), fmt(c.dice), fmt(c.hd95)});
    dice += c.dice / static_cast<double>(m.size());
    hd += c.hd95 / static_cast<double>(m.size());
  }
  csv.row({"mean", fmt(dice), fmt(hd)});
}

// --- subcommands ---------------------------------------------------------------

struct PretrainArgs {
  std::string config, out, data;
  std::optional<std::uint64_t> seed;
};

inline int run_pretrain(const PretrainArgs& a, std::ostream& log) {
  const RunConfig cfg = resolve_config(a.config, a.seed);
  const auto data = a.data.empty() ? training_phantoms(cfg) : load_volume_dir(a.data);
  std::filesystem::create_directories(a.out);
  Pretrainer trainer(cfg.pretrain_config());
  const auto history = run_pretraining(trainer, cfg, data, [&](const StepRecord& r) {
    if (r.step % 10 == 0 || r.step + 1 == cfg.total_steps) log << "step " << r.step << " loss " << fmt(r.loss) << '\n';
  });
  write_loss_csv(std::filesystem::path(a.out) / "loss.csv", history);
  save_checkpoint(make_pretrain_checkpoint(trainer, cfg, cfg.total_steps, Rng(cfg.seed).state()),
                  std::filesystem::path(a.out) / "checkpoint.asac");
  return kOk;
}

struct FinetuneArgs {
  std::string config, out, data, init = "scratch";
  std::optional<std::uint64_t> seed;
};

inline int run_finetune(const FinetuneArgs& a, std::ostream& log) {
  const RunConfig cfg = resolve_config(a.config, a.seed);
  const auto data = a.data.empty() ? training_phantoms(cfg) : load_volume_dir(a.data);
  std::optional<Checkpoint> init;
  if (a.init != "scratch") init = load_checkpoint(a.init);
  std::filesystem::create_directories(a.out);
  Finetuner trainer(cfg.finetune_config(), make_seg_model(cfg, init ? &*init : nullptr));
  const auto history = run_finetuning(trainer, cfg, data, [&](const StepRecord& r) {
    if (r.step % 10 == 0 || r.step + 1 == cfg.ft_steps) log << "step " << r.step << " loss " << fmt(r.loss) << '\n';
  });
  write_loss_csv(std::filesystem::path(a.out) / "loss.csv", history);
  save_checkpoint(make_finetune_checkpoint(trainer, cfg, cfg.ft_steps, Rng(cfg.seed).state()),
                  std::filesystem::path(a.out) / "checkpoint.asac");
  return kOk;
}

struct EvalArgs {
  std::string ckpt, out, data;
};

inline int run_eval(const EvalArgs& a, std::ostream& log) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  if (checkpoint_kind(ck) != "finetune") throw ContractViolation("eval needs a fine-tuning checkpoint");
  const RunConfig cfg = checkpoint_config(ck);
  const auto data = a.data.empty() ? evaluation_phantoms(cfg) : load_volume_dir(a.data);
  const auto metrics = evaluate_model(seg_model_from_checkpoint(ck), data);
  write_metrics_csv(a.out, metrics);
  log << "mean foreground dice " << fmt(mean_foreground_dice(metrics)) << '\n';
  return kOk;
}

struct ReconstructArgs {
  std::string in, ckpt, out;
  double mask_ratio = 0.75;
  std::uint64_t seed = 42;
};

inline int run_reconstruct(const ReconstructArgs& a, std::ostream&) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const AsaModel model = asa_model_from_checkpoint(ck);
  const Volume v = load_volume(a.in);
  if (!(v.dims == model.cfg.volume))
    throw ContractViolation("volume " + dims_str(v.dims) + " does not match the model's " + dims_str(model.cfg.volume));
  const auto plan = make_mask_plan(model.cfg.grid().count(), a.mask_ratio, a.seed);
  save_volume(reconstruct_volume(v, plan, model), a.out);
  return kOk;
}

struct VhogArgs {
  std::string in, out;
  std::size_t patch = 8, bins = 8;
};

/// One row per patch: grid coordinates, mean histogram value and the weight the
/// patch would get if every patch were masked.
inline int run_vhog(const VhogArgs& a, std::ostream&) {
  const Volume v = load_volume(a.in);
  const PatchGrid grid = make_patch_grid(v.dims, a.patch);
  const auto map = informativeness_map(v, grid, a.bins);
  std::vector<std::size_t> all(grid.count());
  std::iota(all.begin(), all.end(), 0);
  const auto p = normalize_weights(map.mean, all);
  CsvWriter csv(a.out, {"t", "h", "w", "gbar", "p"});
  for (std::size_t i = 0; i < grid.count(); ++i) {
    const auto c = grid.coords(i);
    csv.row({std::to_string(c[0]), std::to_string(c[1]), std::to_string(c[2]), fmt(map.mean[i]), fmt(p[i])});
  }
  return kOk;
}

struct SpeArgs {
  std::string grid, out, kind = "spe";
  std::size_t dim = 16;
};

inline int run_spe(const SpeArgs& a, std::ostream&) {
  const Dims g = parse_dims(a.grid);
  const PatchGrid grid{1, g.t, g.h, g.w};
  const auto table = encoding_table(grid, a.dim, parse_encoding_kind(a.kind));
  std::vector<std::string> header{"t", "h", "w"};
  for (std::size_t k = 0; k < a.dim; ++k) header.push_back("e_" + std::to_string(k));
  CsvWriter csv(a.out, header);
  for (std::size_t i = 0; i < grid.count(); ++i) {
    const auto c = grid.coords(i);
    std::vector<std::string> row{std::to_string(c[0]), std::to_string(c[1]), std::to_string(c[2])};
    for (double x : table.row(i)) row.push_back(fmt(x));
    csv.row(row);
  }
  return kOk;
}

inline int run_gradcheck(std::uint64_t seed, std::ostream& log) {
  bool ok = true;
  for (const auto& r : run_gradcheck_suite(seed)) {
    log << (r.passed ? "ok   " : "FAIL ") << r.name << " max_err=" << fmt(r.max_error) << " tol=" << fmt(r.tolerance)
        << " entries=" << r.entries << '\n';
    ok = ok && r.passed;
  }
  return ok ? kOk : kRuntime;
}

struct PhantomArgs {
  std::string spec, out;
};

/// Spec file: {"dims": [T,H,W], "seed", "n_structures", "n_lesions",
/// "noise_sigma", "count"}; writes phantom_000.asav, phantom_001.asav, ...
inline int run_phantom(const PhantomArgs& a, std::ostream& log) {
  std::ifstream in(a.spec);
  if (!in) throw std::runtime_error("cannot open phantom spec " + a.spec);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ContractViolation("phantom spec is not valid JSON: " + std::string(e.what()));
  }
  static const std::vector<std::string> keys{"dims", "seed", "n_structures", "n_lesions", "noise_sigma", "count"};
  for (const auto& [key, value] : j.items())
    if (std::find(keys.begin(), keys.end(), key) == keys.end())
      throw ContractViolation("unknown phantom spec key '" + key + "'");
  PhantomSpec spec;
  std::size_t count = 1;
  try {
    if (j.contains("dims")) {
      const auto d = j.at("dims").get<std::vector<std::size_t>>();
      if (d.size() != 3) throw ContractViolation("dims must list three extents");
      spec.dims = {d[0], d[1], d[2]};
    }
    spec.seed = j.value("seed", spec.seed);
    spec.n_structures = j.value("n_structures", spec.n_structures);
    spec.n_lesions = j.value("n_lesions", spec.n_lesions);
    spec.noise_sigma = j.value("noise_sigma", spec.noise_sigma);
    count = j.value("count", count);
  } catch (const nlohmann::json::exception& e) {
    throw ContractViolation(std::string("phantom spec: ") + e.what());
  }
  spec.validate();
  std::filesystem::create_directories(a.out);
  for (std::size_t i = 0; i < count; ++i) {
    PhantomSpec s = spec;
    s.seed = derive_seed(spec.seed, {kPhantomTag, i});
    char name[48];
    std::snprintf(name, sizeof name, "phantom_%03zu.asav", i);
    save_volume(gen_phantom(s), std::filesystem::path(a.out) / name);
  }
  log << "wrote " << count << " phantom(s) to " << a.out << '\n';
  return kOk;
}

// --- dispatch ------------------------------------------------------------------

/// Parses argv and runs one subcommand. 0 on success, 1 on usage errors, 2 on
/// runtime errors.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Attentive symmetric autoencoder: pretraining, fine-tuning and diagnostics", "asa"};
  app.require_subcommand(1);

  PretrainArgs pre;
  std::uint64_t pre_seed = 0;
  auto* pretrain = app.add_subcommand("pretrain", "masked-autoencoder pretraining on phantoms or a volume directory");
  pretrain->add_option("--config", pre.config, "JSON run config (defaults when omitted)");
  pretrain->add_option("--out", pre.out, "output directory")->required();
  pretrain->add_option("--data", pre.data, "directory of .asav volumes");
  auto* pre_seed_opt = pretrain->add_option("--seed", pre_seed, "overrides the config seed");

  FinetuneArgs ft;
  std::uint64_t ft_seed = 0;
  auto* finetune = app.add_subcommand("finetune", "segmentation fine-tuning");
  finetune->add_option("--config", ft.config, "JSON run config");
  finetune->add_option("--out", ft.out, "output directory")->required();
  finetune->add_option("--data", ft.data, "directory of labelled .asav volumes");
  finetune->add_option("--init", ft.init, "pretraining checkpoint, or 'scratch'")->capture_default_str();
  auto* ft_seed_opt = finetune->add_option("--seed", ft_seed, "overrides the config seed");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Dice/HD95 of a fine-tuned checkpoint");
  eval->add_option("--ckpt", ev.ckpt, "fine-tuning checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--out", ev.out, "metrics CSV")->required();
  eval->add_option("--data", ev.data, "directory of labelled .asav volumes (default: held-out phantoms)");

  ReconstructArgs rec;
  auto* reconstruct = app.add_subcommand("reconstruct", "mask a volume and fill the masked patches from a checkpoint");
  reconstruct->add_option("--in", rec.in, "input .asav")->required()->check(CLI::ExistingFile);
  reconstruct->add_option("--ckpt", rec.ckpt, "pretraining checkpoint")->required()->check(CLI::ExistingFile);
  reconstruct->add_option("--mask-ratio", rec.mask_ratio, "fraction of masked patches")->capture_default_str();
  reconstruct->add_option("--seed", rec.seed, "mask seed")->capture_default_str();
  reconstruct->add_option("--out", rec.out, "output .asav")->required();

  VhogArgs vh;
  auto* vhog = app.add_subcommand("vhog", "per-patch gradient-orientation informativeness");
  vhog->add_option("--in", vh.in, "input .asav")->required()->check(CLI::ExistingFile);
  vhog->add_option("--patch", vh.patch, "patch edge")->capture_default_str();
  vhog->add_option("--bins", vh.bins, "orientation bins per angle")->capture_default_str();
  vhog->add_option("--out", vh.out, "output CSV")->required();

  SpeArgs sp;
  auto* spe = app.add_subcommand("spe", "position-encoding table");
  spe->add_option("--grid", sp.grid, "patch grid T,H,W")->required();
  spe->add_option("--dim", sp.dim, "encoding width")->capture_default_str();
  spe->add_option("--kind", sp.kind, "spe or vanilla")->capture_default_str();
  spe->add_option("--out", sp.out, "output CSV")->required();

  std::uint64_t gc_seed = 1;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op and model");
  gradcheck->add_option("--seed", gc_seed, "input seed")->capture_default_str();

  PhantomArgs ph;
  auto* phantom = app.add_subcommand("phantom", "write synthetic phantoms");
  phantom->add_option("--spec", ph.spec, "JSON phantom spec")->required()->check(CLI::ExistingFile);
  phantom->add_option("--out", ph.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*pretrain) {
      if (*pre_seed_opt) pre.seed = pre_seed;
      return run_pretrain(pre, out);
    }
    if (*finetune) {
      if (*ft_seed_opt) ft.seed = ft_seed;
      return run_finetune(ft, out);
    }
    if (*eval) return run_eval(ev, out);
    if (*reconstruct) return run_reconstruct(rec, out);
    if (*vhog) return run_vhog(vh, out);
    if (*spe) return run_spe(sp, out);
    if (*gradcheck) return run_gradcheck(gc_seed, out);
    if (*phantom) return run_phantom(ph, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kUsage;
}

}  // namespace asa::cli
