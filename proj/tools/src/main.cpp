// comatch: train, evaluate, predict, inspect attention, gradient check.
//
// Exit codes: 0 success, 1 check failure, 2 usage or validation error,
// 3 numeric abort.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "comatch/checkpoint.hpp"
#include "comatch/data.hpp"
#include "comatch/diagnostics.hpp"
#include "comatch/errors.hpp"
#include "comatch/model.hpp"
#include "comatch/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

using Pairs = std::vector<std::pair<std::string, std::string>>;

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw comatch::Error(path.string() + ": cannot open");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void require_file(const fs::path& path, const char* flag) {
  if (!fs::is_regular_file(path)) throw comatch::ValidationError(std::string(flag) + " " + path.string() + ": no such file");
}

void require_dir(const fs::path& path, const char* what) {
  if (!fs::is_directory(path)) throw comatch::ValidationError(std::string(what) + " " + path.string() + ": no such directory");
}

// Flags that map onto TrainConfig keys. Values are collected in command-line
// order and applied after the config file, so flags win.
struct ConfigFlags {
  std::string config_file;
  Pairs overrides;

  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    app->add_option_function<std::string>(
        flag, [this, key](const std::string& v) { overrides.emplace_back(key, v); }, help);
  }

  void add_file_option(CLI::App* app) {
    app->add_option("--config", config_file, "key=value file; command-line flags override it");
  }

  comatch::train::TrainConfig resolve(comatch::train::TrainConfig base) const {
    if (!config_file.empty()) {
      require_file(config_file, "--config");
      base.apply(comatch::train::parse_key_values(read_text(config_file), config_file));
    }
    base.apply(overrides);
    base.validate();
    return base;
  }
};

void print_config(const comatch::train::TrainConfig& cfg, const Pairs& extra = {}) {
  std::cerr << "resolved config:\n";
  for (const auto& [k, v] : cfg.to_pairs()) std::cerr << "  " << k << "=" << v << "\n";
  for (const auto& [k, v] : extra) std::cerr << "  " << k << "=" << v << "\n";
}

std::vector<comatch::data::EncodedExample> encode_all(const std::vector<comatch::data::RawExample>& raw,
                                                      const comatch::data::Vocabulary& vocab,
                                                      const comatch::data::TruncationCaps& caps) {
  std::vector<comatch::data::EncodedExample> out;
  out.reserve(raw.size());
  for (const auto& r : raw) out.push_back(comatch::data::encode_example(r, vocab, caps));
  return out;
}

// Loads the checkpoint and checks any dimensions the user asked for.
comatch::train::Checkpoint open_checkpoint(const std::string& path, const ConfigFlags& flags,
                                           comatch::train::TrainConfig& resolved) {
  require_file(path, "--ckpt");
  auto ckpt = comatch::train::load_checkpoint(path);
  resolved = flags.resolve(ckpt.config);
  comatch::train::require_dims(ckpt, resolved.dims());
  return ckpt;
}

std::vector<double> softmax(const std::vector<double>& scores) {
  double max = scores.front();
  for (double s : scores) max = std::max(max, s);
  double total = 0.0;
  std::vector<double> p(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) total += p[i] = std::exp(scores[i] - max);
  for (double& v : p) v /= total;
  return p;
}

std::vector<double> score(const comatch::model::ModelParams& params, const comatch::tensor::Tensor& embeddings,
                          const comatch::data::EncodedExample& ex) {
  comatch::tensor::Tape tape;
  const auto s = comatch::model::score_candidates(tape, params, embeddings, comatch::data::to_masked(ex));
  return {s.value().data(), s.value().data() + s.size()};
}

json matrix_json(const comatch::tensor::Matrix& m) {
  json rows = json::array();
  for (std::ptrdiff_t r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (std::ptrdiff_t c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<std::string> capped_tokens(std::string_view text, std::size_t cap) {
  auto tokens = comatch::data::tokenize(text);
  if (tokens.size() > cap) tokens.resize(cap);
  if (tokens.empty()) tokens.emplace_back(comatch::data::Vocabulary::kUnkToken);
  return tokens;
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  std::string data, emb, out, metrics;
  ConfigFlags flags;
};

int run_train(const TrainArgs& args) {
  using namespace comatch;
  const auto cfg = args.flags.resolve(train::TrainConfig{});
  const fs::path metrics_path = args.metrics.empty() ? fs::path(args.out + ".metrics.jsonl") : fs::path(args.metrics);
  print_config(cfg, {{"data", args.data},
                     {"emb", args.emb.empty() ? "(random)" : args.emb},
                     {"out", args.out},
                     {"metrics", metrics_path.string()}});
  require_dir(fs::path(args.data) / "train", "--data");
  require_dir(fs::path(args.data) / "dev", "--data");
  if (!args.emb.empty()) require_file(args.emb, "--emb");

  const auto train_raw = data::load_race_dir(fs::path(args.data) / "train", cfg.threads);
  const auto dev_raw = data::load_race_dir(fs::path(args.data) / "dev", cfg.threads);
  if (train_raw.empty()) throw ValidationError("--data " + args.data + ": train split has no examples");
  const auto vocab = data::build_vocab(train_raw, cfg.min_count);
  const auto table = args.emb.empty() ? data::random_embeddings(vocab, cfg.d, cfg.seed)
                                      : data::load_embeddings(args.emb, vocab, cfg.d, cfg.seed);
  std::cerr << "train " << train_raw.size() << " examples, dev " << dev_raw.size() << ", vocabulary "
            << vocab.size() << ", embedding coverage " << std::fixed << std::setprecision(3) << table.coverage
            << std::defaultfloat << "\n";

  std::ofstream metrics(metrics_path);
  if (!metrics) throw Error(metrics_path.string() + ": cannot open for writing");
  train::TrainHooks hooks;
  hooks.metrics_log = &metrics;
  hooks.on_epoch = [](const train::EpochMetrics& m, const model::ModelParams&) {
    std::cerr << "epoch " << m.epoch << " loss " << m.train_loss;
    if (m.dev_accuracy) std::cerr << " dev_acc " << *m.dev_accuracy;
    std::cerr << " (" << m.wall_seconds << " s)\n";
    return true;
  };
  const auto result = train::train(cfg, encode_all(train_raw, vocab, cfg.caps), encode_all(dev_raw, vocab, cfg.caps),
                                   table, vocab, hooks);
  train::save_checkpoint(result.best, args.out);
  std::cout << "wrote " << args.out << " (best epoch " << result.best_epoch << ")\n";
  return kExitOk;
}

// ---- eval -----------------------------------------------------------------

struct EvalArgs {
  std::string ckpt, data, split = "test";
  bool json_out = false;
  ConfigFlags flags;
};

json bucket_json(const comatch::train::Bucket& b) {
  if (b.total == 0) return nullptr;
  return {{"correct", b.correct}, {"total", b.total}, {"accuracy", b.accuracy()}};
}

void print_row(const std::string& name, const comatch::train::Bucket& b) {
  std::cout << std::left << std::setw(10) << name << std::right;
  if (b.total == 0) {
    std::cout << std::setw(9) << "-" << std::setw(8) << 0 << std::setw(10) << "-" << "\n";
    return;
  }
  std::cout << std::setw(9) << b.correct << std::setw(8) << b.total << std::setw(10) << std::fixed
            << std::setprecision(4) << b.accuracy() << std::defaultfloat << "\n";
}

int run_eval(const EvalArgs& args) {
  using namespace comatch;
  train::TrainConfig cfg;
  const auto ckpt = open_checkpoint(args.ckpt, args.flags, cfg);
  print_config(cfg, {{"ckpt", args.ckpt}, {"data", args.data}, {"split", args.split}});
  const fs::path dir = fs::path(args.data) / args.split;
  require_dir(dir, "--data");
  const auto raw = data::load_race_dir(dir, cfg.threads);
  const auto report = train::evaluate(ckpt.params, ckpt.embeddings, encode_all(raw, ckpt.vocab, cfg.caps), cfg.threads);

  if (args.json_out) {
    json doc;
    doc["RACE-M"] = bucket_json(report.middle);
    doc["RACE-H"] = bucket_json(report.high);
    doc["RACE"] = bucket_json(report.overall);
    json types = json::object();
    for (const auto& [tag, b] : report.question_types) types[tag] = bucket_json(b);
    doc["question_types"] = std::move(types);
    std::cout << doc.dump(2) << "\n";
    return kExitOk;
  }
  std::cout << std::left << std::setw(10) << "bucket" << std::right << std::setw(9) << "correct" << std::setw(8)
            << "total" << std::setw(10) << "accuracy" << "\n";
  print_row("RACE-M", report.middle);
  print_row("RACE-H", report.high);
  print_row("RACE", report.overall);
  for (const auto& [tag, b] : report.question_types) print_row(tag, b);
  return kExitOk;
}

// ---- predict --------------------------------------------------------------

struct PredictArgs {
  std::string ckpt, input;
  bool json_out = false;
  ConfigFlags flags;
};

int run_predict(const PredictArgs& args) {
  using namespace comatch;
  train::TrainConfig cfg;
  const auto ckpt = open_checkpoint(args.ckpt, args.flags, cfg);
  print_config(cfg, {{"ckpt", args.ckpt}, {"input", args.input}});
  require_file(args.input, "--input");
  const auto raw = data::load_race_file(args.input, data::Subset::unknown, false);
  const auto params = ckpt.params.constants();

  json doc = json::array();
  for (const auto& r : raw) {
    const auto scores = score(params, ckpt.embeddings, data::encode_example(r, ckpt.vocab, cfg.caps));
    const auto probs = softmax(scores);
    const char letter = static_cast<char>('A' + model::predict(scores));
    if (args.json_out) {
      doc.push_back({{"id", r.id}, {"scores", scores}, {"probabilities", probs}, {"answer", std::string(1, letter)}});
      continue;
    }
    std::cout << r.id << "\n  scores:";
    for (std::size_t i = 0; i < scores.size(); ++i) std::cout << " " << char('A' + i) << "=" << std::setprecision(6) << scores[i];
    std::cout << "\n  probs: ";
    for (std::size_t i = 0; i < probs.size(); ++i) std::cout << " " << char('A' + i) << "=" << std::setprecision(6) << probs[i];
    std::cout << "\n  answer: " << letter << "\n";
  }
  if (args.json_out) std::cout << doc.dump(2) << "\n";
  return kExitOk;
}

// ---- inspect-attention ----------------------------------------------------

struct InspectArgs {
  std::string ckpt, input, out;
  std::size_t question = 0;
  std::size_t option = 0;
  ConfigFlags flags;
};

int run_inspect(const InspectArgs& args) {
  using namespace comatch;
  train::TrainConfig cfg;
  const auto ckpt = open_checkpoint(args.ckpt, args.flags, cfg);
  print_config(cfg, {{"ckpt", args.ckpt},
                     {"input", args.input},
                     {"question", std::to_string(args.question)},
                     {"option", std::to_string(args.option)},
                     {"out", args.out.empty() ? "(stdout)" : args.out}});
  require_file(args.input, "--input");
  const auto raw = data::load_race_file(args.input, data::Subset::unknown, false);
  if (args.question >= raw.size()) {
    throw ValidationError("--question " + std::to_string(args.question) + " out of range (article has " +
                          std::to_string(raw.size()) + " questions)");
  }
  const auto& r = raw[args.question];
  if (args.option >= r.options.size()) {
    throw ValidationError("--option " + std::to_string(args.option) + " out of range (question has " +
                          std::to_string(r.options.size()) + " options)");
  }

  const auto ex = data::encode_example(r, ckpt.vocab, cfg.caps);
  tensor::Tape tape;
  const auto results = model::inspect_attention(tape, ckpt.params.constants(), ckpt.embeddings, data::to_masked(ex),
                                                args.option);

  auto sentences = data::passage_sentences(r.article, cfg.caps.sentence);
  if (cfg.variant == model::Variant::flat) {
    std::vector<std::string> joined;
    for (const auto& s : sentences) joined.insert(joined.end(), s.begin(), s.end());
    sentences = {std::move(joined)};
  }
  json doc;
  doc["sentences"] = sentences;
  doc["question"] = capped_tokens(r.question, cfg.caps.question);
  doc["option"] = capped_tokens(r.options[args.option], cfg.caps.option);
  json gq = json::array();
  json ga = json::array();
  for (const auto& res : results) {
    if (res.question.weights.defined()) gq.push_back(matrix_json(res.question.weights.value()));
    ga.push_back(matrix_json(res.answer.weights.value()));
  }
  doc["G_q"] = std::move(gq);
  doc["G_a"] = std::move(ga);

  if (args.out.empty()) {
    std::cout << doc.dump() << "\n";
  } else {
    std::ofstream out(args.out);
    if (!out) throw Error(args.out + ": cannot open for writing");
    out << doc.dump() << "\n";
    std::cout << "wrote " << args.out << "\n";
  }
  return kExitOk;
}

// ---- gradcheck ------------------------------------------------------------

struct GradcheckArgs {
  std::uint64_t seed = 1;
  double eps = 1e-5;
  std::string variant = "full";
};

int run_gradcheck(const GradcheckArgs& args) {
  using namespace comatch;
  const auto variant = model::parse_variant(args.variant);
  if (!(args.eps > 0.0)) throw ValidationError("--eps must be positive");
  std::cerr << "resolved config:\n  seed=" << args.seed << "\n  eps=" << args.eps << "\n  variant=" << args.variant
            << "\n  tolerance=" << model::kGradCheckTolerance << "\n";
  if (args.eps != 1e-5) {
    std::cout << "note: central-difference error grows like eps^2; the tolerance stays "
              << model::kGradCheckTolerance << "\n";
  }
  const auto entries = model::end_to_end_grad_check(args.seed, args.eps, variant);
  std::vector<std::string> failed;
  for (const auto& e : entries) {
    const bool ok = e.max_relative_error < model::kGradCheckTolerance;
    if (!ok) failed.push_back(e.name);
    std::cout << std::left << std::setw(36) << e.name << std::right << std::scientific << std::setprecision(3)
              << e.max_relative_error << std::defaultfloat << (ok ? "  ok" : "  FAIL") << "\n";
  }
  if (failed.empty()) {
    std::cout << "gradcheck passed (" << entries.size() << " groups)\n";
    return kExitOk;
  }
  std::cout << "gradcheck failed:";
  for (const auto& name : failed) std::cout << " " << name;
  std::cout << "\n";
  return kExitCheckFailed;
}

void add_model_flags(CLI::App* app, ConfigFlags& flags) {
  flags.add_file_option(app);
  flags.add(app, "--d", "d", "embedding width");
  flags.add(app, "--l", "l", "hidden width (even)");
  flags.add(app, "--variant", "variant", "full | single-match | flat");
  flags.add(app, "--threads", "threads", "worker threads");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Co-matching reader for multiple-choice reading comprehension"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train a model and write the best checkpoint");
  train_cmd->add_option("--data", train_args.data, "directory with train/ and dev/ subtrees")->required();
  train_cmd->add_option("--emb", train_args.emb, "embedding text file (random vectors when omitted)");
  train_cmd->add_option("--out", train_args.out, "checkpoint path")->required();
  train_cmd->add_option("--metrics", train_args.metrics, "JSON-lines metrics log (default <out>.metrics.jsonl)");
  add_model_flags(train_cmd, train_args.flags);
  train_args.flags.add(train_cmd, "--lr", "lr", "Adam learning rate");
  train_args.flags.add(train_cmd, "--epochs", "epochs", "number of epochs");
  train_args.flags.add(train_cmd, "--batch", "batch_size", "mini-batch size");
  train_args.flags.add(train_cmd, "--seed", "seed", "seed for every random stream");
  train_args.flags.add(train_cmd, "--clip", "clip_norm", "global gradient norm limit");
  train_args.flags.add(train_cmd, "--min-count", "min_count", "vocabulary frequency cutoff");
  train_args.flags.add(train_cmd, "--dropout", "dropout", "dropout on embedded inputs");
  train_args.flags.add(train_cmd, "--max-sentence", "max_sentence", "sentence truncation cap");
  train_args.flags.add(train_cmd, "--max-question", "max_question", "question truncation cap");
  train_args.flags.add(train_cmd, "--max-option", "max_option", "option truncation cap");
  train_cmd->add_flag_function(
      "--trainable-emb", [&](std::int64_t) { train_args.flags.overrides.emplace_back("trainable_embeddings", "true"); },
      "update the embedding table during training");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "report accuracy by subset and question type");
  eval_cmd->add_option("--ckpt", eval_args.ckpt, "checkpoint")->required();
  eval_cmd->add_option("--data", eval_args.data, "directory with a <split>/ subtree")->required();
  eval_cmd->add_option("--split", eval_args.split, "test | dev")->check(CLI::IsMember({"test", "dev"}));
  eval_cmd->add_flag("--json", eval_args.json_out, "print JSON instead of a table");
  add_model_flags(eval_cmd, eval_args.flags);

  PredictArgs predict_args;
  auto* predict_cmd = app.add_subcommand("predict", "score every question of one article");
  predict_cmd->add_option("--ckpt", predict_args.ckpt, "checkpoint")->required();
  predict_cmd->add_option("--input", predict_args.input, "article JSON (answers optional)")->required();
  predict_cmd->add_flag("--json", predict_args.json_out, "print JSON");
  add_model_flags(predict_cmd, predict_args.flags);

  InspectArgs inspect_args;
  auto* inspect_cmd = app.add_subcommand("inspect-attention", "dump attention matrices for one candidate");
  inspect_cmd->add_option("--ckpt", inspect_args.ckpt, "checkpoint")->required();
  inspect_cmd->add_option("--input", inspect_args.input, "article JSON (answers optional)")->required();
  inspect_cmd->add_option("--question", inspect_args.question, "question index, from 0")->required();
  inspect_cmd->add_option("--option", inspect_args.option, "option index, from 0")->required();
  inspect_cmd->add_option("--out", inspect_args.out, "output file (stdout when omitted)");
  add_model_flags(inspect_cmd, inspect_args.flags);

  GradcheckArgs gc_args;
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference check of the full model on a tiny instance");
  gc_cmd->add_option("--seed", gc_args.seed, "instance seed");
  gc_cmd->add_option("--eps", gc_args.eps, "finite-difference step");
  gc_cmd->add_option("--variant", gc_args.variant, "full | single-match | flat");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train_cmd) return run_train(train_args);
    if (*eval_cmd) return run_eval(eval_args);
    if (*predict_cmd) return run_predict(predict_args);
    if (*inspect_cmd) return run_inspect(inspect_args);
    if (*gc_cmd) return run_gradcheck(gc_args);
  } catch (const comatch::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
