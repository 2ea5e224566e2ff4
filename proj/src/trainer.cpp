#include "memlab/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "memlab/errors.hpp"

namespace memlab {

std::string_view to_string(LossMask mask) { return mask == LossMask::content ? "content" : "full"; }

LossMask loss_mask_from_string(std::string_view name) {
  if (name == "content") return LossMask::content;
  if (name == "full") return LossMask::full;
  throw ConfigError("unknown loss mask '" + std::string(name) + "' (expected content or full)");
}

std::string_view to_string(LrSchedule schedule) { return schedule == LrSchedule::constant ? "constant" : "cosine"; }

LrSchedule lr_schedule_from_string(std::string_view name) {
  if (name == "constant") return LrSchedule::constant;
  if (name == "cosine") return LrSchedule::cosine;
  throw ConfigError("unknown learning-rate schedule '" + std::string(name) + "' (expected constant or cosine)");
}

double TrainConfig::learning_rate_at(std::size_t step, std::size_t total_steps) const {
  double lr = adam.learning_rate;
  if (warmup_steps > 0 && step < warmup_steps) {
    lr *= static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  if (schedule == LrSchedule::cosine && total_steps > 0) {
    lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
  }
  return lr;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("train batch_size must be at least 1");
  if (!(adam.learning_rate > 0.0)) throw ConfigError("train learning_rate must be positive");
  if (!(adam.clip_norm > 0.0)) throw ConfigError("train clip_norm must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("train betas must lie in [0, 1)");
  }
  if (!(adam.epsilon > 0.0)) throw ConfigError("train epsilon must be positive");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"learning_rate", adam.learning_rate},
          {"beta1", adam.beta1},
          {"beta2", adam.beta2},
          {"epsilon", adam.epsilon},
          {"clip_norm", adam.clip_norm},
          {"seed", seed},
          {"loss_mask", std::string(to_string(mask))},
          {"lr_schedule", std::string(to_string(schedule))},
          {"warmup_steps", warmup_steps},
          {"checkpoint_every", checkpoint_every}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("train config must be a JSON object");
  static const std::set<std::string> known{"epochs", "batch_size", "learning_rate", "beta1",     "beta2",
                                           "epsilon", "clip_norm", "seed",          "loss_mask", "checkpoint_every",
                                           "lr_schedule", "warmup_steps"};
  for (const auto& [key, value] : doc.items()) {
    if (!known.contains(key)) throw ConfigError("unknown train config field '" + key + "'");
  }
  TrainConfig c;
  try {
    c.epochs = doc.value("epochs", c.epochs);
    c.batch_size = doc.value("batch_size", c.batch_size);
    c.adam.learning_rate = doc.value("learning_rate", c.adam.learning_rate);
    c.adam.beta1 = doc.value("beta1", c.adam.beta1);
    c.adam.beta2 = doc.value("beta2", c.adam.beta2);
    c.adam.epsilon = doc.value("epsilon", c.adam.epsilon);
    c.adam.clip_norm = doc.value("clip_norm", c.adam.clip_norm);
    c.seed = doc.value("seed", c.seed);
    c.mask = loss_mask_from_string(doc.value("loss_mask", std::string("content")));
    c.checkpoint_every = doc.value("checkpoint_every", c.checkpoint_every);
    c.schedule = lr_schedule_from_string(doc.value("lr_schedule", std::string("constant")));
    c.warmup_steps = doc.value("warmup_steps", c.warmup_steps);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed train config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string TrainTrace::to_csv(bool with_timing) const {
  std::string out = with_timing ? "epoch,mean_loss,seconds\n" : "epoch,mean_loss\n";
  char line[96];
  for (const auto& e : epochs) {
    if (with_timing) {
      std::snprintf(line, sizeof line, "%zu,%.17g,%.3f\n", e.epoch, e.mean_loss, e.seconds);
    } else {
      std::snprintf(line, sizeof line, "%zu,%.17g\n", e.epoch, e.mean_loss);
    }
    out += line;
  }
  return out;
}

void TrainTrace::save_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write train trace " + path);
  out << to_csv();
}

LossBatch make_loss_batch(std::span<const FramedSequence> sequences, LossMask mask) {
  if (sequences.empty()) throw ValueError("make_loss_batch: no sequences");
  std::vector<std::vector<TokenId>> inputs;
  inputs.reserve(sequences.size());
  for (const auto& s : sequences) {
    if (s.tokens.size() < 2) throw ValueError("make_loss_batch: sequence shorter than two tokens");
    inputs.emplace_back(s.tokens.begin(), s.tokens.end() - 1);
  }
  LossBatch b;
  b.inputs = TokenBatch::concat(inputs);
  b.targets.reserve(b.inputs.tokens.size());
  b.mask.reserve(b.inputs.tokens.size());
  for (const auto& s : sequences) {
    for (std::size_t t = 0; t + 1 < s.tokens.size(); ++t) {
      b.targets.push_back(s.tokens[t + 1]);
      const bool content = t + 1 >= s.content_start;
      b.mask.push_back((mask == LossMask::full || content) ? 1 : 0);
    }
  }
  return b;
}

Tensor batch_loss(const TransformerModel& model, const LossBatch& batch) {
  return cross_entropy(model_forward(model, batch.inputs), batch.targets, batch.mask);
}

std::vector<FramedSequence> frame_records(const std::vector<MemoryRecord>& records, const Vocab& vocab,
                                          std::size_t max_seq_len) {
  std::vector<FramedSequence> out;
  out.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    FramedSequence seq;
    try {
      seq = frame_record(vocab, records[i]);
    } catch (const TokenizerError& e) {
      throw TokenizerError("record " + std::to_string(i) + " ('" + records[i].cue_text() + "'): " + e.what());
    }
    // the final token is only ever a target, so the model sees size() - 1
    if (seq.tokens.size() - 1 > max_seq_len) {
      throw TrainError("record " + std::to_string(i) + " ('" + records[i].cue_text() + "') needs " +
                       std::to_string(seq.tokens.size() - 1) + " positions but the context is " +
                       std::to_string(max_seq_len));
    }
    out.push_back(std::move(seq));
  }
  return out;
}

namespace {

// Step buffers are large enough that glibc would mmap and unmap them on every
// step; keeping them on the heap removes most of the kernel time.
void keep_step_buffers() {
#if defined(__GLIBC__)
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 512 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
  });
#endif
}

}  // namespace

nlohmann::json checkpoint_metadata(const Vocab& vocab, const nlohmann::json& extra) {
  nlohmann::json meta = extra.is_object() ? extra : nlohmann::json::object();
  meta["vocab"] = vocab.to_json();
  return meta;
}

Vocab vocab_from_metadata(const nlohmann::json& metadata) {
  if (!metadata.is_object() || !metadata.contains("vocab")) {
    throw IoError("checkpoint metadata carries no vocabulary");
  }
  return Vocab::from_json(metadata.at("vocab"));
}

TrainTrace train(TransformerModel& model, const std::vector<MemoryRecord>& records, const Vocab& vocab,
                 const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (records.empty()) throw TrainError("no training records");
  if (vocab.size() != model.config.vocab_size) {
    throw TrainError("vocabulary has " + std::to_string(vocab.size()) + " ids but the model expects " +
                     std::to_string(model.config.vocab_size));
  }
  const std::vector<FramedSequence> framed = frame_records(records, vocab, model.config.max_seq_len);
  keep_step_buffers();

  std::vector<Tensor> params = model.parameters();
  AdamState state = AdamState::for_params(params);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(framed.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainTrace trace;
  const auto save = [&] {
    if (config.checkpoint_path.empty()) return;
    save_checkpoint(config.checkpoint_path, model, checkpoint_metadata(vocab, {{"train", config.to_json()}}));
    trace.final_checkpoint = config.checkpoint_path;
  };

  const std::size_t steps_per_epoch = (framed.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * config.epochs;
  std::size_t global_step = 0;
  AdamConfig adam = config.adam;
  std::vector<FramedSequence> chunk;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t first = 0; first < order.size(); first += config.batch_size) {
      chunk.clear();
      const std::size_t last = std::min(order.size(), first + config.batch_size);
      for (std::size_t i = first; i < last; ++i) chunk.push_back(framed[order[i]]);
      const LossBatch batch = make_loss_batch(chunk, config.mask);
      try {
        const Tensor loss = batch_loss(model, batch);
        loss_sum += loss.item();
        backward(loss);
        adam.learning_rate = config.learning_rate_at(global_step, total_steps);
        adam_step(params, state, adam);
      } catch (const NonFiniteError& e) {
        throw TrainError("non-finite value at epoch " + std::to_string(epoch) + ", step " + std::to_string(steps + 1) +
                         ": " + e.what());
      }
      reset_grads(params);
      ++steps;
      ++global_step;
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    trace.epochs.push_back({epoch, loss_sum / static_cast<double>(steps), seconds});
    if (on_epoch) on_epoch(trace.epochs.back());
    if (config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 && epoch != config.epochs) save();
  }
  save();
  return trace;
}

}  // namespace memlab
