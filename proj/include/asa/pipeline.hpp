#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <vector>

#include "asa/checkpoint.hpp"
#include "asa/config.hpp"

namespace asa {

inline constexpr std::uint64_t kPhantomTag = 0x7068616eULL;

/// Phantoms with indices [first, first + count) of the run's synthetic dataset.
inline std::vector<Volume> phantom_dataset(const RunConfig& cfg, std::size_t first, std::size_t count) {
  std::vector<Volume> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(gen_phantom(cfg.phantom_spec(derive_seed(cfg.seed, {kPhantomTag, first + i}))));
  return out;
}

inline std::vector<Volume> training_phantoms(const RunConfig& cfg) { return phantom_dataset(cfg, 0, cfg.n_volumes); }

/// Held out: indices after the training set.
inline std::vector<Volume> evaluation_phantoms(const RunConfig& cfg) {
  return phantom_dataset(cfg, cfg.n_volumes, cfg.n_eval_volumes);
}

/// Every .asav file in `dir`, sorted by file name.
inline std::vector<Volume> load_volume_dir(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".asav") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<Volume> out;
  for (const auto& f : files) out.push_back(load_volume(f));
  if (out.empty()) throw std::runtime_error("no .asav volumes in " + dir.string());
  return out;
}

/// Batch `step` of a cyclic pass over `data`; also returns the global sample
/// index of its first element.
inline std::vector<Volume> cyclic_batch(const std::vector<Volume>& data, std::size_t batch_size, std::size_t step,
                                        std::size_t& first_index) {
  first_index = step * batch_size;
  std::vector<Volume> batch;
  for (std::size_t i = 0; i < batch_size; ++i) batch.push_back(data[(first_index + i) % data.size()]);
  return batch;
}

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

using StepCallback = std::function<void(const StepRecord&)>;

inline std::vector<StepRecord> run_pretraining(Pretrainer& trainer, const RunConfig& cfg,
                                               const std::vector<Volume>& data, const StepCallback& on_step = {}) {
  std::vector<StepRecord> log;
  for (std::size_t k = 0; k < cfg.total_steps; ++k) {
    std::size_t first = 0;
    const auto batch = cyclic_batch(data, cfg.batch_size, k, first);
    const double lr = lr_at(k, trainer.config().optimizer);
    log.push_back({k, lr, trainer.step(batch, k, first)});
    if (on_step) on_step(log.back());
  }
  return log;
}

inline std::vector<StepRecord> run_finetuning(Finetuner& trainer, const RunConfig& cfg,
                                              const std::vector<Volume>& data, const StepCallback& on_step = {}) {
  std::vector<StepRecord> log;
  for (std::size_t k = 0; k < cfg.ft_steps; ++k) {
    std::size_t first = 0;
    const auto batch = cyclic_batch(data, cfg.ft_batch_size, k, first);
    const double lr = poly_lr(k, trainer.config().optimizer);
    log.push_back({k, lr, trainer.step(batch, k, first)});
    if (on_step) on_step(log.back());
  }
  return log;
}

/// Segmentation model initialised from scratch or from a pretraining checkpoint's encoder.
inline SegModel make_seg_model(const RunConfig& cfg, const Checkpoint* pretrained) {
  SegModel model = SegModel::init(cfg.seg_config(), cfg.seed);
  if (pretrained) {
    if (checkpoint_kind(*pretrained) != "pretrain")
      throw ContractViolation("--init checkpoint is a '" + checkpoint_kind(*pretrained) + "' checkpoint");
    load_pretrained_encoder(model, *pretrained);
  }
  return model;
}

/// Per-class metrics averaged over volumes; HD95 is +inf if any volume's is.
inline std::vector<ClassMetrics> evaluate_model(const SegModel& model, const std::vector<Volume>& data) {
  const std::size_t C = model.cfg.n_classes;
  std::vector<ClassMetrics> mean(C - 1);
  for (std::size_t c = 1; c < C; ++c) mean[c - 1].label = static_cast<std::uint8_t>(c);
  for (const auto& v : data) {
    if (!v.labels) throw ContractViolation("evaluation volume without labels");
    const auto pred = predict_labels(seg_forward(v, model));
    const auto m = evaluate_segmentation(pred, *v.labels, v.dims, C);
    for (std::size_t k = 0; k < m.size(); ++k) {
      mean[k].dice += m[k].dice / static_cast<double>(data.size());
      mean[k].hd95 += m[k].hd95 / static_cast<double>(data.size());
    }
  }
  return mean;
}

inline double mean_foreground_dice(const std::vector<ClassMetrics>& m) {
  double acc = 0.0;
  for (const auto& c : m) acc += c.dice;
  return m.empty() ? 0.0 : acc / static_cast<double>(m.size());
}

}  // namespace asa
