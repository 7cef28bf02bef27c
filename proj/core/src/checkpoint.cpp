#include "comatch/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "comatch/errors.hpp"

namespace comatch::train {

using tensor::Matrix;

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }

  template <typename T>
  void integer(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
  }

  void f64(double v) { integer(std::bit_cast<std::uint64_t>(v)); }

  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  std::string_view bytes(std::size_t n, const char* what) {
    if (data_.size() - offset_ < n) {
      throw CorruptCheckpointError(std::string("truncated checkpoint reading ") + what + " at offset " +
                                   std::to_string(offset_));
    }
    std::string_view s = data_.substr(offset_, n);
    offset_ += n;
    return s;
  }

  template <typename T>
  T integer(const char* what) {
    std::string_view b = bytes(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return static_cast<T>(v);
  }

  double f64(const char* what) { return std::bit_cast<double>(integer<std::uint64_t>(what)); }

  std::size_t offset() const { return offset_; }
  bool done() const { return offset_ == data_.size(); }

 private:
  std::string_view data_;
  std::size_t offset_ = 0;
};

void write_tensor(Writer& w, const std::string& name, const Matrix& m) {
  w.integer<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
  w.bytes(name.data(), name.size());
  if (m.cols() == 1) {
    w.integer<std::uint8_t>(1);
    w.integer<std::uint32_t>(static_cast<std::uint32_t>(m.rows()));
  } else {
    w.integer<std::uint8_t>(2);
    w.integer<std::uint32_t>(static_cast<std::uint32_t>(m.rows()));
    w.integer<std::uint32_t>(static_cast<std::uint32_t>(m.cols()));
  }
  for (std::ptrdiff_t i = 0; i < m.size(); ++i) w.f64(m.data()[i]);
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.integer<std::uint32_t>(kCheckpointVersion);
  const auto tensors = ckpt.params.tensors();
  const auto names = ckpt.params.names();
  w.integer<std::uint32_t>(static_cast<std::uint32_t>(tensors.size() + 1));
  for (std::size_t i = 0; i < tensors.size(); ++i) write_tensor(w, names[i], tensors[i].value());
  write_tensor(w, "embedding", ckpt.embeddings.value());

  w.integer<std::uint32_t>(static_cast<std::uint32_t>(ckpt.vocab.size()));
  for (const auto& token : ckpt.vocab.tokens()) {
    w.integer<std::uint32_t>(static_cast<std::uint32_t>(token.size()));
    w.bytes(token.data(), token.size());
  }

  std::string config;
  for (const auto& [key, value] : ckpt.config.to_pairs()) config += key + "=" + value + "\n";
  w.integer<std::uint32_t>(static_cast<std::uint32_t>(config.size()));
  w.bytes(config.data(), config.size());
  return w.take();
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.bytes(4, "magic") != std::string_view(kCheckpointMagic, 4)) {
    throw CorruptCheckpointError("bad magic at offset 0");
  }
  const std::size_t version_at = r.offset();
  if (const auto version = r.integer<std::uint32_t>("version"); version != kCheckpointVersion) {
    throw CorruptCheckpointError("unsupported version " + std::to_string(version) + " at offset " +
                                 std::to_string(version_at));
  }

  std::map<std::string, Matrix> stored;
  const auto count = r.integer<std::uint32_t>("tensor count");
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::size_t at = r.offset();
    const auto name_len = r.integer<std::uint16_t>("tensor name length");
    std::string name(r.bytes(name_len, "tensor name"));
    const auto rank = r.integer<std::uint8_t>("tensor rank");
    if (rank != 1 && rank != 2) {
      throw CorruptCheckpointError("tensor " + name + " has rank " + std::to_string(rank) + " at offset " +
                                   std::to_string(at));
    }
    const auto rows = r.integer<std::uint32_t>("tensor dims");
    const std::uint32_t cols = rank == 2 ? r.integer<std::uint32_t>("tensor dims") : 1;
    const std::uint64_t elements = static_cast<std::uint64_t>(rows) * cols;
    if (elements * 8 > bytes.size() - r.offset()) {
      throw CorruptCheckpointError("tensor " + name + " data runs past end of file at offset " +
                                   std::to_string(r.offset()));
    }
    Matrix m(rows, cols);
    for (std::uint64_t i = 0; i < elements; ++i) m.data()[i] = r.f64("tensor data");
    if (!stored.emplace(name, std::move(m)).second) {
      throw CorruptCheckpointError("duplicate tensor " + name + " at offset " + std::to_string(at));
    }
  }

  std::vector<std::string> tokens;
  const auto token_count = r.integer<std::uint32_t>("vocabulary size");
  for (std::uint32_t i = 0; i < token_count; ++i) {
    const auto len = r.integer<std::uint32_t>("token length");
    tokens.emplace_back(r.bytes(len, "token"));
  }
  const auto config_len = r.integer<std::uint32_t>("config length");
  const std::string config_text(r.bytes(config_len, "config"));
  if (!r.done()) throw CorruptCheckpointError("trailing bytes at offset " + std::to_string(r.offset()));

  Checkpoint ckpt;
  try {
    ckpt.config.apply(parse_key_values(config_text, "checkpoint config"));
    ckpt.config.validate();
    ckpt.vocab = data::Vocabulary::from_tokens(std::move(tokens));
  } catch (const Error& e) {
    throw CorruptCheckpointError(std::string("invalid checkpoint metadata: ") + e.what());
  }

  ckpt.params = model::ModelParams::init(ckpt.config.dims(), 0);
  auto targets = ckpt.params.tensors();
  const auto names = ckpt.params.names();
  for (std::size_t i = 0; i < targets.size(); ++i) {
    auto it = stored.find(names[i]);
    if (it == stored.end()) throw CorruptCheckpointError("missing tensor " + names[i]);
    if (it->second.rows() != targets[i].rows() || it->second.cols() != targets[i].cols()) {
      throw CorruptCheckpointError("tensor " + names[i] + " has shape " + std::to_string(it->second.rows()) + "x" +
                                   std::to_string(it->second.cols()) + ", expected " + targets[i].shape_string());
    }
    targets[i].mutable_value() = std::move(it->second);
    stored.erase(it);
  }
  auto emb = stored.find("embedding");
  if (emb == stored.end()) throw CorruptCheckpointError("missing tensor embedding");
  if (emb->second.rows() != ckpt.config.d || static_cast<std::size_t>(emb->second.cols()) != ckpt.vocab.size()) {
    throw CorruptCheckpointError("embedding shape does not match d and vocabulary size");
  }
  ckpt.embeddings = ckpt.config.trainable_embeddings ? tensor::Tensor::parameter(std::move(emb->second))
                                                     : tensor::Tensor::constant(std::move(emb->second));
  stored.erase(emb);
  if (!stored.empty()) throw CorruptCheckpointError("unexpected tensor " + stored.begin()->first);
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(path.string() + ": cannot open for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(path.string() + ": write failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(path.string() + ": cannot open");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return deserialize_checkpoint(buffer.str());
}

void require_dims(const Checkpoint& ckpt, const model::ModelDims& requested) {
  const auto& have = ckpt.params.dims;
  if (have.embedding_dim != requested.embedding_dim || have.hidden != requested.hidden ||
      have.variant != requested.variant) {
    throw MismatchError("checkpoint has d=" + std::to_string(have.embedding_dim) + " l=" + std::to_string(have.hidden) +
                        " variant=" + std::string(model::variant_name(have.variant)) + " but d=" +
                        std::to_string(requested.embedding_dim) + " l=" + std::to_string(requested.hidden) +
                        " variant=" + std::string(model::variant_name(requested.variant)) + " was requested");
  }
}

}  // namespace comatch::train
