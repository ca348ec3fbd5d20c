// Acceptance checks. Prints one PASS/FAIL line per criterion and exits nonzero
// if any fails. Optional arguments select criteria by number.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "asa/asa.hpp"
#include "oracles.hpp"

namespace {

using namespace asa;

struct Outcome {
  bool pass = false;
  std::string detail;
};

// --- tolerances and budgets ------------------------------------------------------

constexpr double kUniformLossTol = 1e-12;
constexpr double kMaskFreqTol = 0.02;
constexpr std::size_t kMaskTrials = 10000;
constexpr double kHd95Tol = 1e-9;
constexpr double kLossRatio = 0.5;

Outcome spe_mirror() {
  std::size_t checked = 0, grids = 0, vanilla_broken = 0, vanilla_grids = 0;
  bool exact = true;
  for (std::size_t D : {16, 32})
    for (std::size_t T = 1; T <= 8; ++T)
      for (std::size_t H = 1; H <= 8; ++H)
        for (std::size_t W = 1; W <= 8; ++W) {
          const PatchGrid g{1, T, H, W};
          ++grids;
          bool broken = false;
          for (std::size_t t = 0; t < T; ++t)
            for (std::size_t h = 0; h < H; ++h)
              for (std::size_t w = 1; w < W; ++w) {
                exact = exact && spe_vector(t, h, w, g, D) == spe_vector(t, h, W - w, g, D);
                ++checked;
                if (w != W - w && vanilla_pe_vector(g.index(t, h, w), D) != vanilla_pe_vector(g.index(t, h, W - w), D))
                  broken = true;
              }
          // W <= 2 has no pair of distinct mirrored columns.
          if (W >= 3) {
            ++vanilla_grids;
            vanilla_broken += broken;
          }
        }
  std::ostringstream os;
  os << checked << " mirrored pairs over " << grids << " grid/width cases; vanilla asymmetric on " << vanilla_broken
     << "/" << vanilla_grids << " grids with distinct pairs";
  return {exact && vanilla_broken == vanilla_grids, os.str()};
}

Outcome vhog_oracle() {
  std::mt19937_64 gen(20240521);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::size_t mismatches = 0, compared = 0;
  for (int k = 0; k < 20; ++k) {
    Volume v({16, 16, 16});
    for (auto& x : v.voxels) x = u(gen);
    // Flat regions make zero-gradient voxels and exercise the empty-bin path.
    if (k % 4 == 3)
      for (std::size_t i = 0; i < v.voxels.size() / 2; ++i) v.voxels[i] = 0.5f;
    const PatchGrid grid = make_patch_grid(v.dims, 4);
    const auto plan = make_mask_plan(grid.count(), 0.75, 1000 + static_cast<std::uint64_t>(k));
    for (std::size_t b : {4, 8}) {
      const auto got = informativeness_weights(v, grid, plan, b);
      const auto want = oracle::vhog_weights(v, 4, b, plan.masked);
      for (std::size_t i = 0; i < got.size(); ++i) {
        mismatches += got[i] != want[i];
        ++compared;
      }
    }
  }
  return {mismatches == 0, std::to_string(compared) + " weights compared, " + std::to_string(mismatches) +
                               " not bit-identical"};
}

Outcome ar_reductions() {
  Rng rng(3);
  const std::size_t n = 16, len = 27;
  std::vector<double> a(n * len), b(n * len);
  for (auto& x : a) x = rng.uniform(-1, 1);
  for (auto& x : b) x = rng.uniform(-1, 1);
  const Tensor recon({n, len}, a), original({n, len}, b);
  const auto plan = make_mask_plan(n, 0.75, 9);
  const std::vector<double> uniform(plan.masked.size(), 1.0 / static_cast<double>(plan.masked.size()));
  const double got = ar_loss(recon, original, plan, uniform).item();
  double want = 0.0;
  for (auto i : plan.masked) {
    double acc = 0.0;
    for (std::size_t j = 0; j < len; ++j) acc += (a[i * len + j] - b[i * len + j]) * (a[i * len + j] - b[i * len + j]);
    want += acc / static_cast<double>(len);
  }
  want /= static_cast<double>(plan.masked.size());

  // Two masked patches with constant residuals 1 and 2 and one visible patch.
  std::vector<double> r(3 * 8, 0.0), o(3 * 8, 0.0);
  for (std::size_t j = 0; j < 8; ++j) {
    r[j] = 1.0;
    r[8 + j] = 2.0;
    r[16 + j] = 5.0;
  }
  const double hand =
      ar_loss(Tensor({3, 8}, r), Tensor({3, 8}, o), mask_plan_from(3, {0, 1}), std::vector<double>{0.75, 0.25}).item();
  std::ostringstream os;
  os << "uniform |diff|=" << std::fabs(got - want) << ", hand example=" << hand;
  return {std::fabs(got - want) < kUniformLossTol && hand == 1.75, os.str()};
}

Outcome gradient_suite() {
  const auto results = run_gradcheck_suite(1);
  std::string failed;
  double worst_prim = 0.0, worst_full = 0.0;
  bool tolerances_ok = true;
  for (const auto& r : results) {
    if (!r.passed) failed += " " + r.name;
    const bool full = r.name == "asa_model_tiny" || r.name == "seg_model_tiny";
    double& worst = full ? worst_full : worst_prim;
    worst = std::max(worst, r.max_error);
    tolerances_ok = tolerances_ok && r.tolerance <= (full ? 1e-3 : 1e-4);
  }
  std::ostringstream os;
  os << results.size() << " checks; worst primitive/layer " << worst_prim << ", worst full model " << worst_full;
  if (!failed.empty()) os << "; failed:" << failed;
  return {failed.empty() && tolerances_ok, os.str()};
}

// d out[row_out, :] / d x[row_in, :] is identically zero?
std::vector<std::vector<bool>> token_dependence(const std::function<Tensor(const Tensor&)>& f, const Tensor& x0) {
  const std::size_t L = x0.dim(0), D = x0.dim(1);
  std::vector<std::vector<bool>> dep(L, std::vector<bool>(L, false));
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t c = 0; c < D; ++c) {
      Tensor x(x0.shape(), {x0.data().begin(), x0.data().end()}, true);
      const Tensor y = f(x);
      std::vector<double> sel(L * D, 0.0);
      sel[i * D + c] = 1.0;
      sum(mul(y, Tensor({L, D}, sel))).backward();
      for (std::size_t j = 0; j < L; ++j)
        for (std::size_t e = 0; e < D; ++e)
          if (x.grad()[j * D + e] != 0.0) dep[i][j] = true;
    }
  return dep;
}

Outcome window_locality() {
  const AttentionConfig cfg{8, 2, 4, 2, 2};
  Rng rng(5);
  const auto block0 = BlockWeights::xavier(cfg, rng), block1 = BlockWeights::xavier(cfg, rng);
  const std::size_t L = 2 * cfg.window;
  std::vector<double> xv(L * cfg.dim);
  for (auto& v : xv) v = rng.uniform(-1, 1);
  const Tensor x0({L, cfg.dim}, xv);

  const auto lw = token_dependence([&](const Tensor& x) { return lw_msa(x, cfg, block0.attn); }, x0);
  std::size_t lw_cross_nonzero = 0, lw_within = 0;
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < L; ++j) {
      const bool same = i / cfg.window == j / cfg.window;
      if (!same && lw[i][j]) ++lw_cross_nonzero;
      if (same && lw[i][j]) ++lw_within;
    }

  const auto pair = token_dependence(
      [&](const Tensor& x) {
        return transformer_block(transformer_block(x, cfg, block0, false), cfg, block1, true);
      },
      x0);
  std::size_t pair_cross = 0;
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < L; ++j)
      if (i / cfg.window != j / cfg.window && pair[i][j]) ++pair_cross;

  std::ostringstream os;
  os << "LW cross-window nonzero rows " << lw_cross_nonzero << " (within-window " << lw_within << "); LW+SLW cross "
     << pair_cross;
  return {lw_cross_nonzero == 0 && lw_within > 0 && pair_cross > 0, os.str()};
}

Outcome masking_contract() {
  const auto plan = make_mask_plan(64, 0.75, 42);
  std::vector<std::size_t> hits(64, 0);
  for (std::size_t seed = 0; seed < kMaskTrials; ++seed)
    for (auto i : make_mask_plan(64, 0.75, seed).masked) ++hits[i];
  double worst = 0.0;
  for (auto h : hits) worst = std::max(worst, std::fabs(static_cast<double>(h) / kMaskTrials - 0.75));
  std::ostringstream os;
  os << plan.masked.size() << " masked of 64; worst per-index frequency deviation " << worst;
  return {plan.masked.size() == 48 && plan.visible.size() == 16 && worst <= kMaskFreqTol, os.str()};
}

struct PretrainRun {
  std::vector<StepRecord> log;
  ParameterList params;
};

PretrainRun pretrain_once(const RunConfig& cfg) {
  Pretrainer trainer(cfg.pretrain_config());
  PretrainRun run;
  run.log = run_pretraining(trainer, cfg, training_phantoms(cfg));
  for (const auto& p : trainer.parameters()) run.params.push_back({p.name, p.tensor.detach(), p.decay});
  return run;
}

Outcome pretraining_smoke() {
  RunConfig cfg;  // desk defaults: 32³, s = 8, 8 phantoms, 200 steps, seed 42
  const auto a = pretrain_once(cfg), b = pretrain_once(cfg);
  const double first = a.log.front().loss, last = a.log.back().loss;
  bool identical = a.log.size() == b.log.size();
  for (std::size_t k = 0; identical && k < a.log.size(); ++k) identical = a.log[k].loss == b.log[k].loss;
  for (std::size_t k = 0; identical && k < a.params.size(); ++k)
    identical = std::equal(a.params[k].tensor.data().begin(), a.params[k].tensor.data().end(),
                           b.params[k].tensor.data().begin());
  std::ostringstream os;
  os << "loss " << first << " -> " << last << " (ratio " << last / first << "), rerun "
     << (identical ? "bit-identical" : "differs");
  return {last < kLossRatio * first && identical, os.str()};
}

Outcome attentiveness() {
  // Flat volume with one 8³ checkerboard patch of 2-voxel cells.
  Volume v({32, 32, 32}, 0.5f);
  const std::size_t pt = 1, ph = 2, pw = 1;
  for (std::size_t a = 0; a < 8; ++a)
    for (std::size_t b = 0; b < 8; ++b)
      for (std::size_t c = 0; c < 8; ++c)
        v.at(pt * 8 + a, ph * 8 + b, pw * 8 + c) = ((a / 2 + b / 2 + c / 2) % 2) ? 1.0f : 0.0f;
  RunConfig run;
  const auto cfg = run.pretrain_config();
  const PatchGrid grid = cfg.model.grid();
  const std::size_t textured = grid.index(pt, ph, pw);

  const auto map = informativeness_map(v, grid, cfg.bins);
  bool strictly_largest = true;
  for (std::size_t i = 0; i < grid.count(); ++i)
    if (i != textured && !(map.mean[textured] > map.mean[i])) strictly_largest = false;

  // Mask plan containing the textured patch; loss contributions from one model.
  MaskPlan plan;
  std::uint64_t seed = 0;
  do plan = make_mask_plan(grid.count(), cfg.mask_ratio, seed++);
  while (!std::binary_search(plan.masked.begin(), plan.masked.end(), textured));
  const auto pos = static_cast<std::size_t>(std::lower_bound(plan.masked.begin(), plan.masked.end(), textured) -
                                            plan.masked.begin());
  const auto weights = informativeness_weights(v, grid, plan, cfg.bins);
  const AsaModel model = AsaModel::init(cfg.model, cfg.seed);
  const Tensor original = patchify(v, grid.s).as_tensor();
  const auto mse = masked_patch_mse(asa_forward(original, plan, model), original, plan);
  const double attentive = weights[pos] * mse[pos];
  const double uniform = mse[pos] / static_cast<double>(plan.masked.size());
  std::ostringstream os;
  os << "p_textured=" << weights[pos] << " (uniform " << 1.0 / static_cast<double>(plan.masked.size())
     << "); contribution attentive " << attentive << " vs uniform " << uniform;
  return {strictly_largest && attentive > uniform, os.str()};
}

Outcome transfer_direction() {
  const std::vector<std::uint64_t> seeds{42, 43, 44};
  std::size_t wins = 0;
  std::ostringstream os;
  for (auto seed : seeds) {
    RunConfig cfg;
    cfg.seed = seed;
    const auto train = training_phantoms(cfg), held_out = evaluation_phantoms(cfg);
    Pretrainer pre(cfg.pretrain_config());
    run_pretraining(pre, cfg, train);
    const Checkpoint ck = make_pretrain_checkpoint(pre, cfg, cfg.total_steps, Rng(seed).state());

    double dice[2];
    for (int from_pretrained = 0; from_pretrained < 2; ++from_pretrained) {
      Finetuner ft(cfg.finetune_config(), make_seg_model(cfg, from_pretrained ? &ck : nullptr));
      run_finetuning(ft, cfg, train);
      dice[from_pretrained] = mean_foreground_dice(evaluate_model(ft.model(), held_out));
    }
    wins += dice[1] >= dice[0];
    os << "seed " << seed << ": pretrained " << dice[1] << " vs scratch " << dice[0] << "; ";
  }
  os << wins << "/3 seeds favour pretraining";
  return {wins >= 2, os.str()};
}

Outcome metric_oracles() {
  std::mt19937_64 gen(77);
  const Dims d{12, 12, 12};
  std::size_t dice_bad = 0, hd_bad = 0;
  double worst = 0.0;
  for (int k = 0; k < 100; ++k) {
    const auto a = oracle::random_mask(d, gen), b = oracle::random_mask(d, gen);
    dice_bad += dice_metric(a, b, 1) != oracle::dice(a, b, 1);
    const double got = hd95_metric(a, b, d, 1), want = oracle::hd95(a, b, d, 1);
    const bool same = (std::isinf(got) && std::isinf(want)) || std::fabs(got - want) <= kHd95Tol;
    if (!std::isinf(want)) worst = std::max(worst, std::fabs(got - want));
    hd_bad += !same;
  }
  std::vector<std::uint8_t> p(d.count(), 0), r(d.count(), 0);
  for (std::size_t t = 2; t < 6; ++t)
    for (std::size_t h = 2; h < 6; ++h)
      for (std::size_t w = 2; w < 6; ++w) {
        p[(t * d.h + h) * d.w + w] = 1;
        r[(t * d.h + h) * d.w + w + 2] = 1;
      }
  const double half = dice_metric(p, r, 1);
  std::ostringstream os;
  os << "dice mismatches " << dice_bad << ", hd95 mismatches " << hd_bad << " (worst |diff| " << worst
     << "), half-overlap dice " << half;
  return {dice_bad == 0 && hd_bad == 0 && half == 0.5, os.str()};
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    const char* name;
    Outcome (*run)();
    double budget_seconds;  // 0: none
  };
  const std::vector<Criterion> criteria{
      {"SPE mirror invariance", spe_mirror, 1.0},
      {"VHOG oracle equivalence", vhog_oracle, 30.0},
      {"attentive loss reductions", ar_reductions, 0.0},
      {"gradient suite", gradient_suite, 300.0},
      {"window locality", window_locality, 0.0},
      {"masking contract", masking_contract, 0.0},
      {"pretraining smoke", pretraining_smoke, 0.0},
      {"attentiveness behaviour", attentiveness, 0.0},
      {"transfer direction", transfer_direction, 1800.0},
      {"metric oracles", metric_oracles, 0.0},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoul(argv[i]));

  int failures = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    if (!selected.empty() && !selected.count(k + 1)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[k].run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (criteria[k].budget_seconds > 0.0 && secs >= criteria[k].budget_seconds) {
      o.pass = false;
      o.detail += "; over the " + std::to_string(static_cast<int>(criteria[k].budget_seconds)) + " s budget";
    }
    failures += !o.pass;
    std::printf("%s %zu %s [%.1fs] %s\n", o.pass ? "PASS" : "FAIL", k + 1, criteria[k].name, secs, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
