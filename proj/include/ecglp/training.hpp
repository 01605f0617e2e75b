// Pretraining loop (AdamW, cosine schedule, early stopping on validation
// zero-shot AUROC) and the optional text-only MLM stage.
#pragma once

#include "ecglp/checkpoint.hpp"
#include "ecglp/config.hpp"
#include "ecglp/losses.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>

namespace ecglp {

template <typename S>
struct TrainContext {
  /// Line-delimited JSON: one "step" record per optimizer step and one
  /// "epoch" record per finished epoch.
  std::ostream* metrics = nullptr;
  /// When set, checkpoints/best.ckpt (and last.ckpt) are written here.
  std::filesystem::path checkpoint_dir;
  /// Text-encoder weights copied in before training.
  const Checkpoint* text_init = nullptr;
  /// Replaces the validation zero-shot AUROC. Returning nullopt means "no signal".
  std::function<std::optional<double>(const Model<S>&)> val_metric;
  /// Progress lines for humans (one per epoch).
  std::ostream* progress = nullptr;
};

struct EpochSummary {
  int epoch = 0;  // 1-based
  long step = 0;
  double train_loss = 0.0;
  std::optional<double> val_metric;
  double lr = 0.0;
  double tau = 0.0;
};

struct TrainResult {
  long steps = 0;
  int epochs_run = 0;
  int best_epoch = 0;
  std::optional<double> best_val_metric;
  bool stopped_early = false;
  std::vector<double> step_losses;
  std::vector<LossBreakdown> step_parts;
  std::vector<EpochSummary> epochs;
};

/// Trains every parameter except the MLM head (and the text encoder when
/// train_text_encoder is off). With early stopping the best-epoch weights are
/// restored before returning. A non-finite loss throws NumericError listing
/// the batch's record ids.
template <typename S>
TrainResult pretrain(Model<S>& model, const Corpus& corpus, const TrainConfig& config, const TrainContext<S>& ctx = {});

/// Text encoder + MLM head on report token sequences. Early stopping is not
/// used; the loop runs for max_steps (or max_epochs when max_steps is 0).
template <typename S>
TrainResult text_mlm_pretrain(Model<S>& model, const std::vector<TextReport>& reports, const TrainConfig& config,
                              const TrainContext<S>& ctx = {});

/// Steps per epoch after dropping a final batch smaller than two.
long steps_per_epoch(std::size_t n_items, int batch_size);

nlohmann::json to_json(const LossBreakdown& parts);

}  // namespace ecglp
