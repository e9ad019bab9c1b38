#include "gramlm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "gramlm/error.hpp"

namespace gramlm {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

namespace {

constexpr char kMagic[8] = {'G', 'R', 'A', 'M', 'T', 'E', 'N', 'S'};

template <typename T>
void put(std::string& out, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  out.append(bytes, sizeof(T));
}

class Cursor {
 public:
  Cursor(const std::string& data, const std::filesystem::path& path) : data_(data), path_(path) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void floats(std::vector<float>& out, std::size_t n) {
    need(n * sizeof(float));
    out.resize(n);
    std::memcpy(out.data(), data_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
  }
  bool done() const { return pos_ == data_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > data_.size() - pos_) throw ParseError(path_.string() + ": truncated tensor file", pos_);
  }
  const std::string& data_;
  const std::filesystem::path& path_;
  std::size_t pos_ = 0;
};

template <typename ParamsT>
void append_tensors(std::vector<NamedTensor>& out, const std::string& prefix, ParamsT& params) {
  visit_params(params, [&](const std::string& name, const auto& t, bool) {
    NamedTensor nt{prefix + name, static_cast<std::uint32_t>(t.rows()),
                   static_cast<std::uint32_t>(t.cols()), {}};
    nt.data.assign(t.data(), t.data() + t.size());
    out.push_back(std::move(nt));
  });
}

template <typename Visit>
void restore(const std::vector<NamedTensor>& tensors, std::size_t& cursor, const std::string& prefix,
             Visit&& visit) {
  visit([&](const std::string& name, auto& t, bool) {
    if (cursor >= tensors.size()) throw VersionError("checkpoint is missing tensor " + prefix + name);
    const NamedTensor& nt = tensors[cursor++];
    if (nt.name != prefix + name || nt.rows != t.rows() || nt.cols != t.cols()) {
      throw VersionError("checkpoint tensor " + nt.name + " [" + std::to_string(nt.rows) + "x" +
                         std::to_string(nt.cols) + "] does not match config tensor " + prefix +
                         name + " [" + std::to_string(t.rows()) + "x" + std::to_string(t.cols()) +
                         "]");
    }
    std::memcpy(t.data(), nt.data.data(), nt.data.size() * sizeof(float));
  });
}

}  // namespace

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kTensorFileVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(file.header_json.size()));
  out += file.header_json;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(file.tensors.size()));
  for (const NamedTensor& t : file.tensors) {
    if (t.data.size() != static_cast<std::size_t>(t.rows) * t.cols) {
      throw ArgumentError("tensor " + t.name + " data does not match its shape");
    }
    put<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out += t.name;
    put<std::uint8_t>(out, 0);
    put<std::uint32_t>(out, t.rows);
    put<std::uint32_t>(out, t.cols);
    out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  f.close();
  if (!f) throw IoError("error while writing " + path.string());
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::ostringstream buf;
  buf << f.rdbuf();
  const std::string data = std::move(buf).str();
  Cursor c(data, path);
  if (c.bytes(sizeof kMagic) != std::string(kMagic, sizeof kMagic)) {
    throw ParseError(path.string() + ": not a tensor file", 0);
  }
  const auto version = c.get<std::uint32_t>();
  if (version != kTensorFileVersion) {
    throw VersionError(path.string() + ": tensor file version " + std::to_string(version) +
                       ", expected " + std::to_string(kTensorFileVersion));
  }
  TensorFile file;
  file.header_json = c.bytes(c.get<std::uint32_t>());
  const auto count = c.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = c.bytes(c.get<std::uint16_t>());
    const std::size_t dtype_at = c.pos();
    if (c.get<std::uint8_t>() != 0) {
      throw ParseError(path.string() + ": unsupported dtype for " + t.name, dtype_at);
    }
    t.rows = c.get<std::uint32_t>();
    t.cols = c.get<std::uint32_t>();
    c.floats(t.data, static_cast<std::size_t>(t.rows) * t.cols);
    file.tensors.push_back(std::move(t));
  }
  if (!c.done()) throw ParseError(path.string() + ": trailing bytes", c.pos());
  return file;
}

std::string model_config_json(const ModelConfig& c) {
  nlohmann::json j = {{"layers", c.layers},         {"hidden", c.hidden},
                      {"heads", c.heads},           {"ffn", c.ffn},
                      {"max_positions", c.max_positions}, {"fine_vocab", c.fine_vocab},
                      {"ngram_vocab", c.ngram_vocab}, {"gen_layers", c.gen_layers},
                      {"gen_heads", c.gen_heads},   {"dropout", c.dropout},
                      {"max_query", c.max_query}};
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ModelConfig c;
    c.layers = j.at("layers");
    c.hidden = j.at("hidden");
    c.heads = j.at("heads");
    c.ffn = j.at("ffn");
    c.max_positions = j.at("max_positions");
    c.fine_vocab = j.at("fine_vocab");
    c.ngram_vocab = j.at("ngram_vocab");
    c.gen_layers = j.at("gen_layers");
    c.gen_heads = j.at("gen_heads");
    c.dropout = j.at("dropout");
    c.max_query = j.at("max_query");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw VersionError(std::string("malformed model config block: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["kind"] = "checkpoint";
  header["config"] = nlohmann::json::parse(model_config_json(ckpt.config));
  header["step"] = ckpt.step;
  header["rng"] = {{"seed", ckpt.rng.seed}, {"counter", ckpt.rng.counter}};
  header["optimizer"] = ckpt.adam_m.has_value();
  header["meta"] = nlohmann::json::parse(ckpt.meta_json);
  TensorFile file;
  file.header_json = header.dump();
  append_tensors(file.tensors, "", ckpt.params);
  if (ckpt.adam_m && ckpt.adam_v) {
    append_tensors(file.tensors, "adam.m.", *ckpt.adam_m);
    append_tensors(file.tensors, "adam.v.", *ckpt.adam_v);
  }
  write_tensor_file(path, file);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const TensorFile file = read_tensor_file(path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(file.header_json);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": malformed header: " + e.what(), 0);
  }
  if (header.value("kind", "") != "checkpoint") {
    throw VersionError(path.string() + ": not a training checkpoint");
  }
  Checkpoint ckpt;
  try {
    ckpt.config = model_config_from_json(header.at("config").dump());
    ckpt.config.validate();
    ckpt.step = header.at("step");
    ckpt.rng = {header.at("rng").at("seed"), header.at("rng").at("counter")};
    ckpt.meta_json = header.value("meta", nlohmann::json::object()).dump();
  } catch (const nlohmann::json::exception& e) {
    throw VersionError(path.string() + ": incomplete checkpoint header: " + e.what());
  } catch (const ConfigError& e) {
    throw VersionError(path.string() + ": " + e.what());
  }
  ckpt.params = zeros_like(init_params<float>(ckpt.config, 0));
  std::size_t cursor = 0;
  restore(file.tensors, cursor, "", [&](auto&& fn) { visit_params(ckpt.params, fn); });
  if (header.value("optimizer", false)) {
    ckpt.adam_m = zeros_like(ckpt.params);
    ckpt.adam_v = zeros_like(ckpt.params);
    restore(file.tensors, cursor, "adam.m.", [&](auto&& fn) { visit_params(*ckpt.adam_m, fn); });
    restore(file.tensors, cursor, "adam.v.", [&](auto&& fn) { visit_params(*ckpt.adam_v, fn); });
  }
  if (cursor != file.tensors.size()) {
    throw VersionError(path.string() + ": unexpected extra tensor " + file.tensors[cursor].name);
  }
  return ckpt;
}

void save_encoder(const std::filesystem::path& path, const Encoder<float>& encoder,
                  const std::string& meta_json) {
  nlohmann::json header;
  header["kind"] = "finetune";
  header["heads"] = encoder.heads;
  header["layers"] = encoder.layers.size();
  header["hidden"] = encoder.hidden();
  header["vocab"] = encoder.vocab();
  header["max_positions"] = encoder.position.rows();
  header["ffn"] = encoder.layers.empty() ? 0 : encoder.layers.front().w_in.cols();
  header["meta"] = nlohmann::json::parse(meta_json);
  TensorFile file;
  file.header_json = header.dump();
  visit_encoder(encoder, "encoder.", [&](const std::string& name, const auto& t, bool) {
    NamedTensor nt{name, static_cast<std::uint32_t>(t.rows()), static_cast<std::uint32_t>(t.cols()),
                   {}};
    nt.data.assign(t.data(), t.data() + t.size());
    file.tensors.push_back(std::move(nt));
  });
  write_tensor_file(path, file);
}

Encoder<float> load_encoder(const std::filesystem::path& path) {
  const TensorFile file = read_tensor_file(path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(file.header_json);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": malformed header: " + e.what(), 0);
  }
  if (header.value("kind", "") != "finetune") {
    throw VersionError(path.string() + ": not an exported encoder");
  }
  Encoder<float> enc;
  try {
    enc.heads = header.at("heads");
    const int h = header.at("hidden");
    const int f = header.at("ffn");
    const int layers = header.at("layers");
    enc.embedding.resize(header.at("vocab").get<int>(), h);
    enc.position.resize(header.at("max_positions").get<int>(), h);
    enc.embed_norm = {RowVector<float>(h), RowVector<float>(h)};
    for (int l = 0; l < layers; ++l) {
      EncoderLayer<float> layer;
      for (auto* m : {&layer.wq, &layer.wk, &layer.wv, &layer.wo}) m->resize(h, h);
      for (auto* b : {&layer.bq, &layer.bk, &layer.bv, &layer.bo, &layer.b_out,
                      &layer.attn_norm.gamma, &layer.attn_norm.beta, &layer.ffn_norm.gamma,
                      &layer.ffn_norm.beta}) {
        b->resize(h);
      }
      layer.w_in.resize(h, f);
      layer.b_in.resize(f);
      layer.w_out.resize(f, h);
      enc.layers.push_back(std::move(layer));
    }
  } catch (const nlohmann::json::exception& e) {
    throw VersionError(path.string() + ": incomplete encoder header: " + e.what());
  }
  std::size_t cursor = 0;
  restore(file.tensors, cursor, "", [&](auto&& fn) { visit_encoder(enc, "encoder.", fn); });
  if (cursor != file.tensors.size()) {
    throw VersionError(path.string() + ": unexpected extra tensor " + file.tensors[cursor].name);
  }
  return enc;
}

}  // namespace gramlm
