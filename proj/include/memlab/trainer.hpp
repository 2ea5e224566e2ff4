#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "memlab/corpus.hpp"
#include "memlab/optim.hpp"
#include "memlab/transformer.hpp"

namespace memlab {

enum class LossMask {
  content,  // content tokens and EOS only
  full,     // every position after BOS
};

std::string_view to_string(LossMask mask);
LossMask loss_mask_from_string(std::string_view name);

enum class LrSchedule {
  constant,
  cosine,  // half cosine from the base rate to zero over the whole run
};

std::string_view to_string(LrSchedule schedule);
LrSchedule lr_schedule_from_string(std::string_view name);

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  AdamConfig adam;  // learning rate 3e-4, betas (0.9, 0.999), eps 1e-8, clip 1.0
  std::uint64_t seed = 0;
  LossMask mask = LossMask::content;
  LrSchedule schedule = LrSchedule::constant;
  std::size_t warmup_steps = 0;  // linear ramp from lr / warmup_steps
  std::size_t checkpoint_every = 0;  // epochs; 0 writes only the final checkpoint
  std::string checkpoint_path;       // empty disables checkpoint files

  // Rate for 0-based optimizer step `step` of `total_steps`.
  double learning_rate_at(std::size_t step, std::size_t total_steps) const;

  void validate() const;
  nlohmann::json to_json() const;
  // Unknown keys are rejected; missing keys keep their defaults.
  static TrainConfig from_json(const nlohmann::json& doc);
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double mean_loss = 0.0;
  double seconds = 0.0;
};

struct TrainTrace {
  std::vector<EpochRecord> epochs;
  std::string final_checkpoint;

  // epoch,mean_loss[,seconds]; without timing the text is reproducible.
  std::string to_csv(bool with_timing = true) const;
  void save_csv(const std::string& path) const;
};

// Teacher-forced batch: inputs are the framed sequences minus their last
// token, packed without padding; targets are the sequences shifted by one.
struct LossBatch {
  TokenBatch inputs;
  std::vector<TokenId> targets;
  std::vector<std::uint8_t> mask;
};

LossBatch make_loss_batch(std::span<const FramedSequence> sequences, LossMask mask);
Tensor batch_loss(const TransformerModel& model, const LossBatch& batch);

// Frames every record, failing with TrainError naming the first record that
// does not fit the model context.
std::vector<FramedSequence> frame_records(const std::vector<MemoryRecord>& records, const Vocab& vocab,
                                          std::size_t max_seq_len);

// Checkpoint metadata carrying the vocabulary so a checkpoint is usable alone.
nlohmann::json checkpoint_metadata(const Vocab& vocab, const nlohmann::json& extra = nlohmann::json::object());
Vocab vocab_from_metadata(const nlohmann::json& metadata);

using EpochCallback = std::function<void(const EpochRecord&)>;

// Trains `model` in place with Adam on shuffled mini-batches. The model must
// not be shared with concurrent readers while this runs.
TrainTrace train(TransformerModel& model, const std::vector<MemoryRecord>& records, const Vocab& vocab,
                 const TrainConfig& config, const EpochCallback& on_epoch = {});

}  // namespace memlab
