#include "comatch/trainer.hpp"

#include <chrono>
#include <cmath>
#include <future>
#include <sstream>

#include "json.hpp"

#include "comatch/errors.hpp"
#include "comatch/random.hpp"

namespace comatch::train {

using tensor::Matrix;

// ---- configuration ------------------------------------------------------------

namespace {

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  T out{};
  in >> out;
  if (in.fail() || !in.eof()) throw ConfigError("config key " + key + ": \"" + value + "\" is not a valid number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config key " + key + ": \"" + value + "\" is not a boolean");
}

std::string format_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace

std::vector<std::string> TrainConfig::keys() {
  return {"d",       "l",          "lr",       "batch_size",   "epochs",    "seed",    "clip_norm",
          "trainable_embeddings",  "variant",  "max_sentence", "max_question", "max_option", "min_count",
          "dropout", "threads"};
}

std::vector<std::pair<std::string, std::string>> TrainConfig::to_pairs() const {
  return {{"d", std::to_string(d)},
          {"l", std::to_string(l)},
          {"lr", format_double(lr)},
          {"batch_size", std::to_string(batch_size)},
          {"epochs", std::to_string(epochs)},
          {"seed", std::to_string(seed)},
          {"clip_norm", format_double(clip_norm)},
          {"trainable_embeddings", trainable_embeddings ? "true" : "false"},
          {"variant", std::string(model::variant_name(variant))},
          {"max_sentence", std::to_string(caps.sentence)},
          {"max_question", std::to_string(caps.question)},
          {"max_option", std::to_string(caps.option)},
          {"min_count", std::to_string(min_count)},
          {"dropout", format_double(dropout)},
          {"threads", std::to_string(threads)}};
}

void TrainConfig::apply(const std::vector<std::pair<std::string, std::string>>& pairs) {
  for (const auto& [key, value] : pairs) {
    if (key == "d") d = parse_number<std::ptrdiff_t>(key, value);
    else if (key == "l") l = parse_number<std::ptrdiff_t>(key, value);
    else if (key == "lr") lr = parse_number<double>(key, value);
    else if (key == "batch_size") batch_size = parse_number<std::size_t>(key, value);
    else if (key == "epochs") epochs = parse_number<std::size_t>(key, value);
    else if (key == "seed") seed = parse_number<std::uint64_t>(key, value);
    else if (key == "clip_norm") clip_norm = parse_number<double>(key, value);
    else if (key == "trainable_embeddings") trainable_embeddings = parse_bool(key, value);
    else if (key == "variant") variant = model::parse_variant(value);
    else if (key == "max_sentence") caps.sentence = parse_number<std::size_t>(key, value);
    else if (key == "max_question") caps.question = parse_number<std::size_t>(key, value);
    else if (key == "max_option") caps.option = parse_number<std::size_t>(key, value);
    else if (key == "min_count") min_count = parse_number<std::size_t>(key, value);
    else if (key == "dropout") dropout = parse_number<double>(key, value);
    else if (key == "threads") threads = parse_number<unsigned>(key, value);
    else throw ConfigError("unknown config key \"" + key + "\"");
  }
}

void TrainConfig::validate() const {
  if (d < 1) throw ConfigError("d must be positive");
  if (l < 2 || l % 2 != 0) throw ConfigError("l must be even and positive, got " + std::to_string(l));
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (caps.sentence < 1 || caps.question < 1 || caps.option < 1) throw ConfigError("truncation caps must be positive");
  if (min_count < 1) throw ConfigError("min_count must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
  if (threads < 1) throw ConfigError("threads must be positive");
}

std::vector<std::pair<std::string, std::string>> parse_key_values(std::string_view text, const std::string& source) {
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    std::string content = trim(line);
    if (content.empty()) continue;
    const auto eq = content.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": expected key=value");
    }
    out.emplace_back(trim(std::string_view(content).substr(0, eq)), trim(std::string_view(content).substr(eq + 1)));
    if (end == text.size()) break;
  }
  return out;
}

// ---- optimizer ------------------------------------------------------------------

void adam_step(std::span<Tensor> params, std::span<const std::string> names, AdamState& state, double lr) {
  if (names.size() != params.size()) throw ContractError("adam_step: one name per parameter required");
  if (state.first_moment.empty()) {
    for (const Tensor& p : params) {
      state.first_moment.push_back(Matrix::Zero(p.rows(), p.cols()));
      state.second_moment.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
  }
  if (state.first_moment.size() != params.size()) throw ContractError("adam_step: state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].grad().allFinite()) throw NumericError("non-finite gradient for parameter " + names[i]);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(AdamState::kBeta1, t);
  const double correction2 = 1.0 - std::pow(AdamState::kBeta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& g = params[i].grad();
    Matrix& m = state.first_moment[i];
    Matrix& v = state.second_moment[i];
    if (m.rows() != g.rows() || m.cols() != g.cols()) {
      throw DimensionError("adam_step: moment shape mismatch for " + names[i]);
    }
    m = AdamState::kBeta1 * m + (1.0 - AdamState::kBeta1) * g;
    v = AdamState::kBeta2 * v + (1.0 - AdamState::kBeta2) * g.cwiseProduct(g);
    params[i].mutable_value().array() -=
        lr * (m.array() / correction1) / ((v.array() / correction2).sqrt() + AdamState::kEpsilon);
  }
}

double clip_global_norm(std::span<Tensor> params, double max_norm) {
  double squared = 0.0;
  for (const Tensor& p : params) squared += p.grad().squaredNorm();
  const double norm = std::sqrt(squared);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (Tensor& p : params) p.mutable_grad() *= factor;
  }
  return norm;
}

// ---- evaluation -----------------------------------------------------------------

namespace {

// Runs fn(i) for i in [0, n) on `threads` workers with a fixed stride
// partition, so which worker handles which index never depends on timing.
template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i, 0u);
    return;
  }
  std::vector<std::future<void>> jobs;
  for (unsigned t = 0; t < threads; ++t) {
    jobs.push_back(std::async(std::launch::async, [&, t] {
      for (std::size_t i = t; i < n; i += threads) fn(i, t);
    }));
  }
  for (auto& job : jobs) job.get();
}

}  // namespace

EvalReport evaluate(const model::ModelParams& params, const Tensor& embeddings,
                    const std::vector<data::EncodedExample>& examples, unsigned threads) {
  if (examples.empty()) throw ValidationError("evaluate: empty dataset");
  const model::ModelParams frozen = params.constants();
  const Tensor table = Tensor::constant(embeddings.value());
  std::vector<std::uint8_t> correct(examples.size(), 0);
  parallel_for(examples.size(), threads, [&](std::size_t i, unsigned) {
    const auto& ex = examples[i];
    if (ex.gold < 0) throw ValidationError("evaluate: example " + ex.id + " has no gold answer");
    tensor::Tape tape;
    Tensor scores = model::score_candidates(tape, frozen, table, data::to_masked(ex));
    correct[i] = model::predict(scores) == static_cast<std::size_t>(ex.gold) ? 1 : 0;
  });

  EvalReport report;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    auto tally = [&](Bucket& b) {
      ++b.total;
      b.correct += correct[i];
    };
    tally(report.overall);
    if (examples[i].subset == data::Subset::middle) tally(report.middle);
    if (examples[i].subset == data::Subset::high) tally(report.high);
    for (const auto& tag : model::bucket_by_question_type(examples[i].question_tokens)) {
      tally(report.question_types[tag]);
    }
  }
  return report;
}

// ---- training -------------------------------------------------------------------

std::string metrics_json_line(const EpochMetrics& m) {
  nlohmann::ordered_json j;
  j["epoch"] = m.epoch;
  j["train_loss"] = m.train_loss;
  j["dev_accuracy"] = m.dev_accuracy ? nlohmann::ordered_json(*m.dev_accuracy) : nlohmann::ordered_json(nullptr);
  j["wall_seconds"] = m.wall_seconds;
  return j.dump();
}

namespace {

struct Replica {
  model::ModelParams params;
  Tensor embeddings;

  std::vector<Tensor> trainable() const {
    std::vector<Tensor> out = params.tensors();
    if (embeddings.requires_grad()) out.push_back(embeddings);
    return out;
  }
};

Checkpoint snapshot(const Replica& master, const data::Vocabulary& vocab, const TrainConfig& config) {
  return {master.params.clone(), master.embeddings.detached_copy(), vocab, config};
}

}  // namespace

TrainResult train(const TrainConfig& config, const std::vector<data::EncodedExample>& train_set,
                  const std::vector<data::EncodedExample>& dev_set, const data::EmbeddingTable& embeddings,
                  const data::Vocabulary& vocab, const TrainHooks& hooks) {
  config.validate();
  if (embeddings.dim() != config.d) {
    throw ConfigError("embedding table has d = " + std::to_string(embeddings.dim()) + " but config asks for d = " +
                      std::to_string(config.d));
  }
  if (static_cast<std::size_t>(embeddings.vectors.cols()) != vocab.size()) {
    throw ConfigError("embedding table does not cover the vocabulary");
  }

  Replica master{model::ModelParams::init(config.dims(), config.seed),
                 config.trainable_embeddings ? Tensor::parameter(embeddings.vectors)
                                             : Tensor::constant(embeddings.vectors)};
  TrainResult result;
  result.best = snapshot(master, vocab, config);
  if (config.epochs == 0) return result;
  if (train_set.empty()) throw ValidationError("train: empty training set");

  std::vector<Tensor> master_trainable = master.trainable();
  std::vector<std::string> names = master.params.names();
  if (master.embeddings.requires_grad()) names.push_back("embedding");

  const unsigned workers = std::max(1u, config.threads);
  std::vector<Replica> replicas;
  for (unsigned w = 0; w < workers; ++w) {
    replicas.push_back({master.params.clone(),
                        config.trainable_embeddings ? master.embeddings.detached_copy() : master.embeddings});
  }

  std::vector<std::vector<Tensor>> replica_trainable;
  for (const auto& r : replicas) replica_trainable.push_back(r.trainable());

  AdamState adam;
  std::optional<double> best_dev;
  const auto start = std::chrono::steady_clock::now();

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto batches = data::make_batches(train_set, config.batch_size, config.seed, epoch);
    double loss_total = 0.0;
    std::size_t seen = 0;

    for (std::size_t b = 0; b < batches.size(); ++b) {
      const data::Batch& batch = batches[b];
      for (auto& r : replicas) {
        r.params.copy_values_from(master.params);
        r.params.zero_grad();
        if (r.embeddings.requires_grad()) {
          r.embeddings.mutable_value() = master.embeddings.value();
          r.embeddings.zero_grad();
        }
      }
      std::vector<double> losses(batch.size(), 0.0);
      parallel_for(batch.size(), workers, [&](std::size_t i, unsigned w) {
        Replica& r = replicas[w];
        std::mt19937_64 rng = substream(config.seed, "dropout", epoch * 1000003ULL + batch.example_index[i]);
        model::ForwardOptions options{config.dropout, &rng};
        tensor::Tape tape;
        Tensor scores = model::score_candidates(tape, r.params, r.embeddings, batch.example(i), options);
        Tensor loss = model::candidate_loss(tape, scores, static_cast<std::size_t>(batch.gold[i]));
        losses[i] = loss.item();
        if (std::isfinite(losses[i])) tape.backward(loss);
      });
      for (double l : losses) {
        if (!std::isfinite(l)) {
          throw NumericError("non-finite loss in epoch " + std::to_string(epoch) + " batch " + std::to_string(b));
        }
        loss_total += l;
      }
      seen += batch.size();

      // Mean loss over the batch; replicas merge in worker order.
      const double inv = 1.0 / static_cast<double>(batch.size());
      for (std::size_t k = 0; k < master_trainable.size(); ++k) {
        Matrix& g = master_trainable[k].mutable_grad();
        g.setZero();
        for (const auto& rt : replica_trainable) g += rt[k].grad();
        g *= inv;
      }
      clip_global_norm(master_trainable, config.clip_norm);
      adam_step(master_trainable, names, adam, config.lr);
    }

    EpochMetrics metrics;
    metrics.epoch = epoch;
    metrics.train_loss = loss_total / static_cast<double>(seen);
    if (!dev_set.empty()) {
      metrics.dev_accuracy = evaluate(master.params, master.embeddings, dev_set, workers).overall.accuracy();
    }
    metrics.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.history.push_back(metrics);
    if (hooks.metrics_log != nullptr) *hooks.metrics_log << metrics_json_line(metrics) << '\n' << std::flush;

    const bool improved = dev_set.empty() || !best_dev || *metrics.dev_accuracy > *best_dev;
    if (improved) {
      if (metrics.dev_accuracy) best_dev = metrics.dev_accuracy;
      result.best = snapshot(master, vocab, config);
      result.best_epoch = epoch;
    }
    if (hooks.on_epoch && !hooks.on_epoch(metrics, master.params)) break;
  }
  return result;
}

}  // namespace comatch::train
