#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "revlm/checkpoint.hpp"
#include "revlm/common.hpp"
#include "revlm/corpus.hpp"
#include "revlm/det_random.hpp"
#include "revlm/model.hpp"
#include "revlm/tokenizer.hpp"

namespace revlm {

struct TrainConfig {
  double base_lr = 2e-5;
  double warmup_ratio = 0.03;   // fraction of total optimizer steps
  double weight_decay = 0.001;
  std::size_t grad_accum_steps = 8;
  std::size_t epochs = 5;
  std::size_t batch_size = 4;
  std::size_t chunk_size = 1024;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;       // 0 disables clipping
  std::uint64_t seed = 0;

  void validate() const {
    if (!(base_lr > 0)) throw ValidationError("train config: base_lr must be > 0");
    if (!(warmup_ratio >= 0 && warmup_ratio < 1))
      throw ValidationError("train config: warmup_ratio must be in [0,1)");
    if (grad_accum_steps < 1) throw ValidationError("train config: grad_accum_steps must be >= 1");
    if (epochs < 1) throw ValidationError("train config: epochs must be >= 1");
    if (batch_size < 1) throw ValidationError("train config: batch_size must be >= 1");
    if (chunk_size < 2) throw ValidationError("train config: chunk_size must be >= 2");
    if (grad_clip < 0) throw ValidationError("train config: grad_clip must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"base_lr", c.base_lr},
                     {"warmup_ratio", c.warmup_ratio},
                     {"weight_decay", c.weight_decay},
                     {"grad_accum_steps", c.grad_accum_steps},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"chunk_size", c.chunk_size},
                     {"adam_beta1", c.adam_beta1},
                     {"adam_beta2", c.adam_beta2},
                     {"adam_eps", c.adam_eps},
                     {"grad_clip", c.grad_clip},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  c.base_lr = j.value("base_lr", c.base_lr);
  c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.grad_accum_steps = j.value("grad_accum_steps", c.grad_accum_steps);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.chunk_size = j.value("chunk_size", c.chunk_size);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.seed = j.value("seed", c.seed);
}

/// Encodes all documents, joins them with the end-of-document marker,
/// and slices the stream into non-overlapping chunks of exactly
/// chunk_size tokens. A trailing partial chunk is dropped. The corpus
/// and tokenizer must agree on orientation; this guards the experiment's
/// core manipulation.
inline std::vector<std::vector<std::uint32_t>> chunk_stream(const Corpus& corpus,
                                                            const TokenizerModel& tok,
                                                            std::size_t chunk_size) {
  if (corpus.orientation != tok.orientation)
    throw ValidationError("chunk_stream: corpus orientation (" + to_string(corpus.orientation) +
                          ") does not match tokenizer orientation (" + to_string(tok.orientation) +
                          ")");
  if (chunk_size < 2) throw ValidationError("chunk_stream: chunk_size must be >= 2");

  std::vector<std::vector<std::uint32_t>> chunks;
  std::vector<std::uint32_t> buffer;
  buffer.reserve(chunk_size);
  auto flush_into_chunks = [&](const std::vector<std::uint32_t>& ids) {
    for (std::uint32_t id : ids) {
      buffer.push_back(id);
      if (buffer.size() == chunk_size) {
        chunks.push_back(buffer);
        buffer.clear();
      }
    }
  };
  for (const auto& doc : corpus.documents) {
    flush_into_chunks(tok.encode_ids(doc.text));
    flush_into_chunks({TokenizerModel::kEodId});
  }
  return chunks;
}

/// Cosine schedule with linear warmup: 0 -> base_lr over the first
/// ceil(warmup_ratio * total) steps, then base_lr * 0.5*(1+cos(pi*p))
/// where p spans the remaining steps; exactly 0 at step == total.
inline double lr_schedule(std::uint64_t step, std::uint64_t total_steps, double warmup_ratio,
                          double base_lr) {
  if (total_steps == 0) throw ValidationError("lr_schedule: total_steps must be > 0");
  if (step > total_steps)
    throw ValidationError("lr_schedule: step " + std::to_string(step) + " exceeds total_steps " +
                          std::to_string(total_steps));
  const auto warmup_steps = static_cast<std::uint64_t>(
      std::ceil(warmup_ratio * static_cast<double>(total_steps)));
  if (step < warmup_steps)
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (step == total_steps) return 0.0;
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

/// One AdamW update: decoupled weight decay (applied to the pre-update
/// parameters, independent of the moments) plus the bias-corrected
/// moment step. Increments the state's step counter once.
inline void adamw_step(Parameters<float>& params, const Parameters<float>& grads,
                       OptimizerState& state, const TrainConfig& cfg, double lr) {
  if (lr < 0) throw ValidationError("adamw_step: negative learning rate");
  if (!all_finite(grads))
    throw ValidationError("adamw_step: non-finite gradient; step aborted");

  state.step += 1;
  const auto b1 = static_cast<float>(cfg.adam_beta1);
  const auto b2 = static_cast<float>(cfg.adam_beta2);
  const auto eps = static_cast<float>(cfg.adam_eps);
  const auto bias1 = static_cast<float>(1.0 - std::pow(cfg.adam_beta1,
                                                       static_cast<double>(state.step)));
  const auto bias2 = static_cast<float>(1.0 - std::pow(cfg.adam_beta2,
                                                       static_cast<double>(state.step)));
  const auto flr = static_cast<float>(lr);
  const auto decay = static_cast<float>(lr * cfg.weight_decay);

  auto ps = tensor_list(params);
  auto gs = tensor_list(grads);
  auto ms = tensor_list(state.m);
  auto vs = tensor_list(state.v);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& p = *ps[i].second;
    const auto& g = *gs[i].second;
    auto& m = *ms[i].second;
    auto& v = *vs[i].second;
    if (decay != 0.0f) p -= decay * p;
    m = b1 * m + (1.0f - b1) * g;
    v.array() = b2 * v.array() + (1.0f - b2) * g.array().square();
    p.array() -= flr * (m.array() / bias1) / ((v.array() / bias2).sqrt() + eps);
  }
  if (!all_finite(params))
    throw ValidationError("adamw_step: parameters became non-finite at step " +
                          std::to_string(state.step));
}

struct TrainStepRecord {
  std::uint64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double val_loss = 0.0;
  double val_ppl = 0.0;
};

struct TrainLog {
  std::vector<TrainStepRecord> steps;
  std::vector<EpochRecord> epochs;
};

struct TrainOptions {
  std::filesystem::path out_dir;                      // empty: no files written
  const Corpus* val_corpus = nullptr;                 // optional per-epoch validation
  std::string tokenizer_fingerprint;
  Orientation orientation = Orientation::kForward;
  std::function<void(const TrainStepRecord&)> on_step;  // optional progress hook
  std::optional<OptimizerState> resume_state;
  std::uint64_t resume_step = 0;                      // optimizer steps already taken
};

/// Mean validation cross-entropy over the chunked corpus.
inline double evaluate_loss(const ModelConfig& mcfg, const Parameters<float>& params,
                            const std::vector<std::vector<std::uint32_t>>& chunks) {
  if (chunks.empty()) throw ValidationError("evaluate_loss: no chunks");
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& chunk : chunks) {
    TokenBatch batch = make_next_token_batch({chunk});
    Mat<float> logits = forward_sequence<float>(mcfg, params, batch.inputs[0]);
    const std::size_t n = batch.targets[0].size();
    total += cross_entropy(std::vector<Mat<float>>{std::move(logits)}, batch.targets) *
             static_cast<double>(n);
    count += n;
  }
  return total / static_cast<double>(count);
}

/// Runs the training loop: per epoch, deterministically reshuffled chunk
/// order, gradient accumulation with micro-batch averaging (so the
/// effective gradient equals one combined batch), one AdamW step per
/// accumulation window, per-epoch validation and checkpointing.
inline TrainLog train(Parameters<float>& params, const Corpus& corpus, const TokenizerModel& tok,
                      const TrainConfig& cfg, const ModelConfig& mcfg,
                      const TrainOptions& options = {}) {
  cfg.validate();
  mcfg.validate();
  if (corpus.orientation != tok.orientation)
    throw ValidationError("train: corpus/tokenizer orientation mismatch");
  if (options.orientation != tok.orientation)
    throw ValidationError("train: run orientation does not match tokenizer orientation");
  if (cfg.chunk_size > mcfg.context_length + 1)
    throw ValidationError("train: chunk_size " + std::to_string(cfg.chunk_size) +
                          " exceeds context_length+1");

  const auto chunks = chunk_stream(corpus, tok, cfg.chunk_size);
  if (chunks.empty())
    throw ValidationError("train: corpus yields no full chunks at chunk_size " +
                          std::to_string(cfg.chunk_size));
  std::vector<std::vector<std::uint32_t>> val_chunks;
  if (options.val_corpus) val_chunks = chunk_stream(*options.val_corpus, tok, cfg.chunk_size);

  const std::size_t micro_per_epoch = (chunks.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t steps_per_epoch =
      (micro_per_epoch + cfg.grad_accum_steps - 1) / cfg.grad_accum_steps;
  const std::uint64_t total_steps = cfg.epochs * steps_per_epoch;

  OptimizerState state;
  if (options.resume_state) {
    state = *options.resume_state;
  } else {
    state.m = shaped_zeros<float>(mcfg);
    state.v = shaped_zeros<float>(mcfg);
  }
  Parameters<float> grads = shaped_zeros<float>(mcfg);
  Parameters<float> micro_grads = shaped_zeros<float>(mcfg);

  TrainLog log;
  std::uint64_t opt_step = options.resume_step;
  const std::size_t start_epoch = static_cast<std::size_t>(opt_step / steps_per_epoch);

  std::ofstream step_csv;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    const auto mode = options.resume_step > 0 ? std::ios::app : std::ios::trunc;
    step_csv.open(options.out_dir / "train_log.csv", mode);
    step_csv << std::setprecision(17);
    if (options.resume_step == 0) step_csv << "step,lr,loss\n";
  }

  for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(chunks.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    DetRng rng(cfg.seed ^ (0x9e3779b97f4a7c15ull * (epoch + 1)));
    rng.shuffle(order);

    std::size_t micro_index = 0;
    while (micro_index < micro_per_epoch) {
      const std::size_t window =
          std::min(cfg.grad_accum_steps, micro_per_epoch - micro_index);
      set_zero(grads);
      double window_loss = 0.0;
      for (std::size_t a = 0; a < window; ++a, ++micro_index) {
        const std::size_t begin = micro_index * cfg.batch_size;
        const std::size_t end = std::min(begin + cfg.batch_size, chunks.size());
        std::vector<std::vector<std::uint32_t>> micro;
        micro.reserve(end - begin);
        for (std::size_t i = begin; i < end; ++i) micro.push_back(chunks[order[i]]);
        const TokenBatch batch = make_next_token_batch(micro);
        const double loss = batch_loss_and_gradients(mcfg, params, batch, micro_grads);
        if (!std::isfinite(loss))
          throw ValidationError("train: non-finite loss at optimizer step " +
                                std::to_string(opt_step + 1));
        window_loss += loss;
        auto gs = tensor_list(grads);
        auto mg = tensor_list(micro_grads);
        for (std::size_t i = 0; i < gs.size(); ++i) *gs[i].second += *mg[i].second;
      }
      // Average micro-batch gradients so base_lr is independent of the
      // accumulation factor.
      const auto inv_window = static_cast<float>(1.0 / static_cast<double>(window));
      for (auto& [name, t] : tensor_list(grads)) *t *= inv_window;
      window_loss /= static_cast<double>(window);

      if (cfg.grad_clip > 0.0) {
        double sq = 0.0;
        for (const auto& [name, t] : tensor_list(grads))
          sq += static_cast<double>(t->squaredNorm());
        const double norm = std::sqrt(sq);
        if (norm > cfg.grad_clip) {
          const auto scale = static_cast<float>(cfg.grad_clip / norm);
          for (auto& [name, t] : tensor_list(grads)) *t *= scale;
        }
      }

      const double lr = lr_schedule(opt_step, total_steps, cfg.warmup_ratio, cfg.base_lr);
      adamw_step(params, grads, state, cfg, lr);
      ++opt_step;

      TrainStepRecord rec{opt_step, lr, window_loss};
      log.steps.push_back(rec);
      if (step_csv.is_open())
        step_csv << rec.step << ',' << rec.lr << ',' << rec.loss << '\n';
      if (options.on_step) options.on_step(rec);
    }

    EpochRecord erec;
    erec.epoch = epoch + 1;
    if (!val_chunks.empty()) {
      erec.val_loss = evaluate_loss(mcfg, params, val_chunks);
      erec.val_ppl = std::exp(erec.val_loss);
    }
    log.epochs.push_back(erec);

    if (!options.out_dir.empty()) {
      Checkpoint ckpt;
      ckpt.config = mcfg;
      ckpt.params = params;
      ckpt.orientation = options.orientation;
      ckpt.tokenizer_fingerprint = options.tokenizer_fingerprint;
      ckpt.train_step = opt_step;
      ckpt.optimizer = state;
      save_checkpoint(ckpt, options.out_dir / ("checkpoint_epoch" + std::to_string(epoch + 1) +
                                               ".bin"));
    }
  }

  if (!options.out_dir.empty() && !val_chunks.empty()) {
    std::ofstream val_csv(options.out_dir / "val_log.csv", std::ios::trunc);
    val_csv << std::setprecision(17) << "epoch,val_loss,val_ppl\n";
    for (const auto& e : log.epochs)
      val_csv << e.epoch << ',' << e.val_loss << ',' << e.val_ppl << '\n';
  }
  return log;
}

}  // namespace revlm
