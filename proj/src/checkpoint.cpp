#include "mitr/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "mitr/binary_io.hpp"
#include "mitr/error.hpp"

namespace mitr {

std::string serialize_checkpoint(const Mitr& model) {
  binary::Writer w;
  w.put_bytes(std::string_view(kCheckpointMagic, sizeof(kCheckpointMagic)));
  w.put(kCheckpointVersion);
  const ModelConfig& c = model.config();
  for (std::size_t v : {c.d_model, c.n_heads, c.n_layers, c.d_ffn, c.vocab_size, c.d_visual, c.max_len}) {
    w.put(static_cast<std::uint64_t>(v));
  }
  const auto& words = model.vocab().words();
  w.put(static_cast<std::uint64_t>(words.size()));
  for (const auto& word : words) {
    w.put_string(word);
  }
  const ParamStore& p = model.params();
  w.put(static_cast<std::uint64_t>(p.size()));
  for (std::size_t i = 0; i < p.size(); ++i) {
    w.put_string(p.name(i));
    const Tensor& t = p.value(i);
    w.put(static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t e : t.shape) {
      w.put(static_cast<std::uint64_t>(e));
    }
    for (double v : t.data) {
      w.put(v);
    }
  }
  return w.take();
}

Mitr deserialize_checkpoint(std::string_view bytes) {
  binary::Reader r(bytes, "checkpoint");
  if (r.get_bytes(sizeof(kCheckpointMagic)) != std::string_view(kCheckpointMagic, sizeof(kCheckpointMagic))) {
    throw DataError("checkpoint: bad magic");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  ModelConfig c;
  for (std::size_t* field : {&c.d_model, &c.n_heads, &c.n_layers, &c.d_ffn, &c.vocab_size,
                             &c.d_visual, &c.max_len}) {
    *field = static_cast<std::size_t>(r.get<std::uint64_t>());
  }
  const auto n_words = r.get<std::uint64_t>();
  std::vector<std::string> words;
  for (std::uint64_t i = 0; i < n_words; ++i) {
    words.push_back(r.get_string());
  }
  Vocabulary vocab(words);
  if (vocab.words() != words) {
    throw DataError("checkpoint: vocabulary does not start with the special tokens");
  }
  ParamStore params;
  const auto n_params = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n_params; ++i) {
    std::string name = r.get_string();
    const auto rank = r.get<std::uint32_t>();
    if (rank != 2) {
      throw DataError("checkpoint: parameter '" + name + "' has rank " + std::to_string(rank));
    }
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    if (rows == 0 || cols == 0 || rows * cols > r.remaining() / sizeof(double)) {
      throw DataError("checkpoint: parameter '" + name + "' has invalid extents");
    }
    Tensor t(static_cast<std::size_t>(rows), static_cast<std::size_t>(cols));
    for (double& v : t.data) {
      v = r.get<double>();
    }
    params.add(std::move(name), std::move(t));
  }
  if (!r.at_end()) {
    throw DataError("checkpoint: trailing bytes");
  }
  return Mitr(c, std::move(vocab), std::move(params));
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError("cannot open '" + path + "'");
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw DataError("cannot write '" + path + "'");
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw DataError("write to '" + path + "' failed");
  }
}

void save_checkpoint(const Mitr& model, const std::string& path) {
  write_file(path, serialize_checkpoint(model));
}

Mitr load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file(path)); }

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace mitr
