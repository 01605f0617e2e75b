#include "ecglp/training.hpp"

#include "ecglp/eval.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

namespace ecglp {

using nlohmann::json;
namespace fs = std::filesystem;

long steps_per_epoch(std::size_t n_items, int batch_size) {
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
  const long full = static_cast<long>(n_items) / batch_size;
  const long rest = static_cast<long>(n_items) % batch_size;
  return full + (rest >= 2 ? 1 : 0);
}

json to_json(const LossBreakdown& p) {
  return json{{"total", p.total}, {"l_g", p.l_g}, {"l_lm", p.l_lm}, {"l_local", p.l_local}};
}

namespace {

void shuffle(std::vector<std::size_t>& order, Rng& rng) {
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
}

// Batches of one epoch; the last one is dropped when it holds fewer than two items.
std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, int batch_size) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(n, start + static_cast<std::size_t>(batch_size));
    if (end - start >= 2) out.emplace_back(start, end);
  }
  return out;
}

long total_steps(std::size_t n, const TrainConfig& c) {
  return c.max_steps > 0 ? c.max_steps : steps_per_epoch(n, c.batch_size) * c.max_epochs;
}

double lr_at(long step, long total, const TrainConfig& c) {
  return c.schedule == "cosine" ? cosine_lr(step, total, c.lr, c.warmup_steps) : c.lr;
}

AdamWOptions adam_options(const TrainConfig& c) { return {c.beta1, c.beta2, c.adam_eps, c.weight_decay}; }

template <typename S>
std::vector<Matrix<S>> snapshot(const std::vector<Tensor<S>>& params) {
  std::vector<Matrix<S>> out;
  for (const auto& p : params) out.push_back(p.value());
  return out;
}

template <typename S>
void restore(std::vector<Tensor<S>>& params, const std::vector<Matrix<S>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i].mutable_value() = values[i];
}

void write_line(std::ostream* os, const json& j) {
  if (os) *os << j.dump() << '\n';
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

template <typename S>
TrainResult pretrain(Model<S>& model, const Corpus& corpus, const TrainConfig& config, const TrainContext<S>& ctx) {
  config.validate();
  if (corpus.train.size() < 2) throw DataError("pretraining needs at least 2 training pairs");
  for (const auto& p : corpus.train) {
    if (!p.report) throw DataError("training pair " + p.ecg.id + " has no report");
  }
  const std::vector<Code> classes = codes_in(corpus.mix);
  auto val_metric = ctx.val_metric;
  if (!val_metric) {
    val_metric = [&](const Model<S>& m) -> std::optional<double> {
      if (corpus.val.empty()) return std::nullopt;
      try {
        return zero_shot_auroc(m, corpus.val, classes, corpus.vocab).value;
      } catch (const EvalError&) {
        return std::nullopt;
      }
    };
  }
  if (ctx.text_init) copy_text_encoder(model, *ctx.text_init);

  std::vector<Tensor<S>> trained;
  for (const auto& p : model.parameters().tensors()) {
    if (p.name().rfind("mlm_head", 0) == 0) continue;
    if (!model.config().train_text_encoder && model.is_text_encoder_param(p.name())) continue;
    trained.push_back(p);
  }
  AdamW<S> optimizer(trained, adam_options(config));
  auto all_params = model.parameters().tensors();

  const LossSwitches switches{config.use_global, config.use_lm, config.use_local};
  const std::size_t n = corpus.train.size();
  const auto ranges = batch_ranges(n, config.batch_size);
  const long total = total_steps(n, config);
  const int max_epochs = config.max_steps > 0 ? std::numeric_limits<int>::max() : config.max_epochs;

  Rng shuffle_rng(Rng::derive(config.seed, "shuffle"));
  Rng dropout_rng(Rng::derive(config.seed, "dropout"));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  std::vector<Matrix<S>> best_values;
  int since_best = 0;
  long step = 0;

  auto save = [&](const std::string& file, int epoch) {
    if (ctx.checkpoint_dir.empty()) return;
    json meta{{"kind", "pretrain"},
              {"epoch", epoch},
              {"step", step},
              {"best_val_metric", optional_json(result.best_val_metric)},
              {"train_config", config},
              {"rng", {{"shuffle", shuffle_rng.state()}, {"dropout", dropout_rng.state()}}}};
    save_checkpoint(ctx.checkpoint_dir / file, make_checkpoint(model, &optimizer, std::move(meta)));
  };

  for (int epoch = 1; epoch <= max_epochs && step < total; ++epoch) {
    shuffle(order, shuffle_rng);
    double epoch_loss = 0.0;
    int epoch_steps = 0;
    double lr = config.lr;
    for (const auto& [begin, end] : ranges) {
      if (step >= total) break;
      std::vector<const EcgTextPair*> batch;
      for (std::size_t i = begin; i < end; ++i) batch.push_back(&corpus.train[order[i]]);
      lr = lr_at(step, total, config);

      model.parameters().zero_grad();
      auto loss = batch_loss(model, batch, switches, model.mode(true, &dropout_rng));
      if (!std::isfinite(loss.parts.total)) {
        std::string ids;
        for (const auto* p : batch) ids += (ids.empty() ? "" : ",") + p->ecg.id;
        throw NumericError("non-finite loss at step " + std::to_string(step + 1) + "; batch ids: " + ids);
      }
      backward(loss.total);
      optimizer.step(lr);
      model.clamp_tau();
      ++step;
      ++epoch_steps;
      epoch_loss += loss.parts.total;
      result.step_losses.push_back(loss.parts.total);
      result.step_parts.push_back(loss.parts);

      json line{{"type", "step"}, {"epoch", epoch}, {"step", step}, {"lr", lr}, {"tau", model.tau()}};
      line["loss"] = to_json(loss.parts);
      if (config.eval_every > 0 && step % config.eval_every == 0) line["val_metric"] = optional_json(val_metric(model));
      write_line(ctx.metrics, line);
    }
    if (epoch_steps == 0) break;

    EpochSummary summary{epoch, step, epoch_loss / epoch_steps, std::nullopt, lr, model.tau()};
    bool stop = false;
    if (config.early_stopping) {
      summary.val_metric = val_metric(model);
      if (summary.val_metric && (!result.best_val_metric || *summary.val_metric > *result.best_val_metric)) {
        result.best_val_metric = summary.val_metric;
        result.best_epoch = epoch;
        best_values = snapshot(all_params);
        since_best = 0;
        save("best.ckpt", epoch);
      } else if (++since_best >= config.patience) {
        stop = true;
      }
    }
    result.epochs.push_back(summary);
    result.epochs_run = epoch;
    write_line(ctx.metrics, json{{"type", "epoch"},
                                 {"epoch", epoch},
                                 {"step", step},
                                 {"train_loss", summary.train_loss},
                                 {"val_metric", optional_json(summary.val_metric)},
                                 {"best_val_metric", optional_json(result.best_val_metric)},
                                 {"lr", summary.lr},
                                 {"tau", summary.tau}});
    if (ctx.progress) {
      *ctx.progress << "epoch " << epoch << " step " << step << " loss " << summary.train_loss;
      if (summary.val_metric) *ctx.progress << " val " << *summary.val_metric;
      *ctx.progress << std::endl;
    }
    if (stop) {
      result.stopped_early = true;
      break;
    }
  }
  result.steps = step;

  if (!best_values.empty()) {
    restore(all_params, best_values);
  } else {
    result.best_epoch = result.epochs_run;
    save("best.ckpt", result.epochs_run);
  }
  return result;
}

template <typename S>
TrainResult text_mlm_pretrain(Model<S>& model, const std::vector<TextReport>& reports, const TrainConfig& config,
                              const TrainContext<S>& ctx) {
  config.validate();
  if (reports.size() < 2) throw DataError("MLM pretraining needs at least 2 reports");
  std::vector<Tensor<S>> trained;
  for (const auto& p : model.parameters().tensors()) {
    if (model.is_text_encoder_param(p.name()) || p.name().rfind("mlm_head", 0) == 0) trained.push_back(p);
  }
  AdamW<S> optimizer(trained, adam_options(config));

  const std::size_t n = reports.size();
  const auto ranges = batch_ranges(n, config.batch_size);
  const long total = total_steps(n, config);
  const int max_epochs = config.max_steps > 0 ? std::numeric_limits<int>::max() : config.max_epochs;
  const int vocab = model.config().vocab_size;

  Rng shuffle_rng(Rng::derive(config.seed, "shuffle"));
  Rng dropout_rng(Rng::derive(config.seed, "dropout"));
  Rng mask_rng(Rng::derive(config.seed, "mask"));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  long step = 0;
  for (int epoch = 1; epoch <= max_epochs && step < total; ++epoch) {
    shuffle(order, shuffle_rng);
    double epoch_loss = 0.0;
    int epoch_steps = 0;
    double lr = config.lr;
    for (const auto& [begin, end] : ranges) {
      if (step >= total) break;
      lr = lr_at(step, total, config);
      model.parameters().zero_grad();
      const auto mode = model.mode(true, &dropout_rng);
      std::vector<Tensor<S>> logits;
      std::vector<int> targets;
      for (std::size_t i = begin; i < end; ++i) {
        const auto masked = mask_tokens(reports[order[i]].token_ids, vocab, mask_rng);
        logits.push_back(model.mlm_logits(masked.input, mode));
        targets.insert(targets.end(), masked.targets.begin(), masked.targets.end());
      }
      const auto loss = mlm_loss(concat_rows(logits), targets);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        throw NumericError("non-finite MLM loss at step " + std::to_string(step + 1));
      }
      backward(loss);
      optimizer.step(lr);
      ++step;
      ++epoch_steps;
      epoch_loss += value;
      result.step_losses.push_back(value);
      write_line(ctx.metrics, json{{"type", "step"}, {"epoch", epoch}, {"step", step}, {"lr", lr}, {"mlm_loss", value}});
    }
    if (epoch_steps == 0) break;
    result.epochs.push_back({epoch, step, epoch_loss / epoch_steps, std::nullopt, lr, model.tau()});
    result.epochs_run = epoch;
    write_line(ctx.metrics, json{{"type", "epoch"}, {"epoch", epoch}, {"step", step}, {"train_loss", epoch_loss / epoch_steps}, {"lr", lr}});
    if (ctx.progress) *ctx.progress << "mlm epoch " << epoch << " step " << step << " loss " << epoch_loss / epoch_steps << std::endl;
  }
  result.steps = step;
  result.best_epoch = result.epochs_run;
  if (!ctx.checkpoint_dir.empty()) {
    json meta{{"kind", "mlm"}, {"epoch", result.epochs_run}, {"step", step}, {"train_config", config}};
    save_checkpoint(ctx.checkpoint_dir / "mlm.ckpt", make_checkpoint(model, &optimizer, std::move(meta)));
  }
  return result;
}

template TrainResult pretrain<float>(Model<float>&, const Corpus&, const TrainConfig&, const TrainContext<float>&);
template TrainResult pretrain<double>(Model<double>&, const Corpus&, const TrainConfig&, const TrainContext<double>&);
template TrainResult text_mlm_pretrain<float>(Model<float>&, const std::vector<TextReport>&, const TrainConfig&,
                                              const TrainContext<float>&);
template TrainResult text_mlm_pretrain<double>(Model<double>&, const std::vector<TextReport>&, const TrainConfig&,
                                               const TrainContext<double>&);

}  // namespace ecglp
