#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "comatch/data.hpp"
#include "comatch/model.hpp"

namespace comatch::train {

using tensor::Tensor;

struct TrainConfig {
  std::ptrdiff_t d = 100;
  std::ptrdiff_t l = 150;
  double lr = 1e-3;
  std::size_t batch_size = 16;
  std::size_t epochs = 10;
  std::uint64_t seed = 1;
  double clip_norm = 5.0;
  bool trainable_embeddings = false;
  model::Variant variant = model::Variant::full;
  data::TruncationCaps caps;
  std::size_t min_count = 1;
  double dropout = 0.0;
  unsigned threads = 1;

  model::ModelDims dims() const { return {d, l, variant}; }

  // Throws ConfigError naming the first offending field.
  void validate() const;

  // Flat key=value form, keys in a fixed order.
  std::vector<std::pair<std::string, std::string>> to_pairs() const;
  // Applies pairs over the current values; unknown keys are rejected.
  void apply(const std::vector<std::pair<std::string, std::string>>& pairs);
  static std::vector<std::string> keys();
};

// Parses "key=value" lines; '#' starts a comment, blank lines are skipped.
std::vector<std::pair<std::string, std::string>> parse_key_values(std::string_view text, const std::string& source);

struct AdamState {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEpsilon = 1e-8;

  std::vector<tensor::Matrix> first_moment;
  std::vector<tensor::Matrix> second_moment;
  std::uint64_t step = 0;
};

// One bias-corrected Adam update from the gradients stored on `params`.
// Throws NumericError naming the parameter if any gradient is not finite.
void adam_step(std::span<Tensor> params, std::span<const std::string> names, AdamState& state, double lr);

// Rescales all gradients so their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_global_norm(std::span<Tensor> params, double max_norm);

struct Bucket {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
};

struct EvalReport {
  Bucket overall;
  Bucket middle;  // RACE-M; total 0 means the subset is absent
  Bucket high;    // RACE-H
  std::map<std::string, Bucket> question_types;
};

// Scores every example and buckets accuracy by subset and question type.
// Each example is scored on its own tape, so the report does not depend on
// `threads`.
EvalReport evaluate(const model::ModelParams& params, const Tensor& embeddings,
                    const std::vector<data::EncodedExample>& examples, unsigned threads = 1);

struct Checkpoint {
  model::ModelParams params;
  Tensor embeddings;  // d x |V|
  data::Vocabulary vocab;
  TrainConfig config;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> dev_accuracy;
  double wall_seconds = 0.0;
};

// One JSON object per line: epoch, train_loss, dev_accuracy, wall_seconds.
std::string metrics_json_line(const EpochMetrics& m);

struct TrainResult {
  Checkpoint best;
  std::vector<EpochMetrics> history;
  std::size_t best_epoch = 0;  // 0 = initial parameters
};

struct TrainHooks {
  // Called after each epoch with the current (not best) parameters.
  // Returning false stops training.
  std::function<bool(const EpochMetrics&, const model::ModelParams&)> on_epoch;
  std::ostream* metrics_log = nullptr;
};

// Mini-batch Adam over `train_set`; the checkpoint with the best dev accuracy
// wins (earlier epoch on ties, last epoch when dev_set is empty).
TrainResult train(const TrainConfig& config, const std::vector<data::EncodedExample>& train_set,
                  const std::vector<data::EncodedExample>& dev_set, const data::EmbeddingTable& embeddings,
                  const data::Vocabulary& vocab, const TrainHooks& hooks = {});

}  // namespace comatch::train
