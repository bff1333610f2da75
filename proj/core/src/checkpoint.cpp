#include "nnformer/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

#include "nnformer/config.hpp"
#include "nnformer/errors.hpp"

namespace nnformer::train {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr std::string_view kMagic = "NNF1";
constexpr std::string_view kConfigName = "__config__";
constexpr std::uint8_t kDtypeF32 = 1;
constexpr std::uint8_t kDtypeUtf8 = 2;

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

void put_header(std::string& out, std::string_view name, std::uint8_t dtype, const Shape& extents) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.append(name);
  put<std::uint8_t>(out, dtype);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(extents.size()));
  for (std::int64_t e : extents) put<std::uint64_t>(out, static_cast<std::uint64_t>(e));
}

void put_array(std::string& out, const ArrayEntry& a) {
  if (static_cast<std::int64_t>(a.values.size()) != numel(a.extents)) {
    throw std::logic_error("checkpoint entry " + a.name + " holds the wrong number of values");
  }
  put_header(out, a.name, kDtypeF32, a.extents);
  out.append(reinterpret_cast<const char*>(a.values.data()), a.values.size() * sizeof(float));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::string_view take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
    const auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  template <typename U>
  U get() {
    U v;
    std::memcpy(&v, take(sizeof(U)).data(), sizeof(U));
    return v;
  }

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

struct RawEntry {
  std::string name;
  std::uint8_t dtype = 0;
  Shape extents;
  std::string_view payload;
};

RawEntry read_entry(Reader& r) {
  RawEntry e;
  const auto len = r.get<std::uint32_t>();
  e.name = std::string(r.take(len));
  e.dtype = r.get<std::uint8_t>();
  const auto rank = r.get<std::uint32_t>();
  if (rank > 8) throw FormatError("checkpoint entry " + e.name + " has implausible rank " + std::to_string(rank));
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto ext = r.get<std::uint64_t>();
    if (ext > (std::uint64_t{1} << 40)) throw FormatError("checkpoint entry " + e.name + " has an implausible extent");
    e.extents.push_back(static_cast<std::int64_t>(ext));
    count *= ext;
  }
  std::size_t width = 0;
  if (e.dtype == kDtypeF32) {
    width = sizeof(float);
  } else if (e.dtype == kDtypeUtf8) {
    width = 1;
  } else {
    throw FormatError("checkpoint entry " + e.name + " has unknown dtype " + std::to_string(e.dtype));
  }
  if (count > r.remaining() / width) throw FormatError("checkpoint truncated inside entry " + e.name);
  e.payload = r.take(static_cast<std::size_t>(count) * width);
  return e;
}

ArrayEntry to_array(const RawEntry& e) {
  if (e.dtype != kDtypeF32) throw FormatError("checkpoint entry " + e.name + " is not an f32 array");
  ArrayEntry a{e.name, e.extents, std::vector<float>(e.payload.size() / sizeof(float))};
  std::memcpy(a.values.data(), e.payload.data(), e.payload.size());
  return a;
}

std::vector<ArrayEntry> read_table(Reader& r) {
  const auto count = r.get<std::uint32_t>();
  std::vector<ArrayEntry> out;
  for (std::uint32_t i = 0; i < count; ++i) out.push_back(to_array(read_entry(r)));
  return out;
}

void copy_into(const ArrayEntry& src, const net::NamedTensor<float>& dst) {
  if (src.name != dst.name) {
    throw FormatError("checkpoint entry " + src.name + " found where " + dst.name + " was expected");
  }
  if (src.extents != dst.tensor.shape()) {
    throw FormatError("checkpoint entry " + src.name + " has shape " + to_string(src.extents) + ", model expects " +
                      to_string(dst.tensor.shape()));
  }
  Tensor<float> t = dst.tensor;
  std::copy(src.values.begin(), src.values.end(), t.mutable_data().begin());
}

ArrayEntry from_tensor(const net::NamedTensor<float>& t) {
  return {t.name, t.tensor.shape(), std::vector<float>(t.tensor.data().begin(), t.tensor.data().end())};
}

}  // namespace

std::string serialize(const Checkpoint& ckpt) {
  std::string out(kMagic);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.parameters.size() + 1));
  put_header(out, kConfigName, kDtypeUtf8, Shape{static_cast<std::int64_t>(ckpt.config_text.size())});
  out.append(ckpt.config_text);
  for (const auto& p : ckpt.parameters) put_array(out, p);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.velocity.size()));
  for (const auto& v : ckpt.velocity) put_array(out, v);
  put<std::uint64_t>(out, ckpt.rng_state);
  put<std::uint64_t>(out, ckpt.epoch);
  return out;
}

Checkpoint deserialize(std::string_view bytes) {
  Reader r(bytes);
  if (bytes.size() < kMagic.size() || r.take(kMagic.size()) != kMagic) {
    throw FormatError("not a checkpoint: missing NNF1 tag");
  }
  Checkpoint ckpt;
  const auto count = r.get<std::uint32_t>();
  if (count == 0) throw FormatError("checkpoint has no config entry");
  const RawEntry config = read_entry(r);
  if (config.name != kConfigName || config.dtype != kDtypeUtf8 || config.extents.size() != 1) {
    throw FormatError("checkpoint does not start with a config entry");
  }
  ckpt.config_text = std::string(config.payload);
  for (std::uint32_t i = 1; i < count; ++i) ckpt.parameters.push_back(to_array(read_entry(r)));
  ckpt.velocity = read_table(r);
  ckpt.rng_state = r.get<std::uint64_t>();
  ckpt.epoch = r.get<std::uint64_t>();
  if (!r.done()) throw FormatError("checkpoint has " + std::to_string(r.remaining()) + " trailing bytes");
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string bytes = serialize(ckpt);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError("cannot write checkpoint " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw UsageError("cannot write checkpoint " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw UsageError("cannot move checkpoint into " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

Checkpoint capture(const net::Model<float>& model, const Sgd<float>* optimizer, std::uint64_t rng_state,
                   std::uint64_t epoch) {
  Checkpoint ckpt;
  ckpt.config_text = config_to_text(model.config());
  for (const auto& p : model.parameters()) ckpt.parameters.push_back(from_tensor(p));
  if (optimizer != nullptr) {
    for (const auto& v : optimizer->velocity()) ckpt.velocity.push_back(from_tensor(v));
  }
  ckpt.rng_state = rng_state;
  ckpt.epoch = epoch;
  return ckpt;
}

void restore(const Checkpoint& ckpt, net::Model<float>& model, Sgd<float>* optimizer) {
  const std::string expected = config_to_text(model.config());
  if (ckpt.config_text != expected) {
    ModelConfig theirs;
    std::string label = "unparseable config";
    try {
      theirs = parse_config(ckpt.config_text);
      label = "config '" + theirs.name + "'";
    } catch (const Error&) {
    }
    throw ConfigError("checkpoint was written for " + label + ", not for model config '" + model.config().name +
                      "'");
  }
  const auto params = model.parameters();
  if (params.size() != ckpt.parameters.size()) {
    throw FormatError("checkpoint holds " + std::to_string(ckpt.parameters.size()) + " parameters, model has " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) copy_into(ckpt.parameters[i], params[i]);
  if (optimizer != nullptr && !ckpt.velocity.empty()) {
    auto& vel = optimizer->velocity();
    if (vel.size() != ckpt.velocity.size()) throw FormatError("checkpoint optimizer state does not match the model");
    for (std::size_t i = 0; i < vel.size(); ++i) copy_into(ckpt.velocity[i], vel[i]);
  }
}

net::Model<float> model_from_checkpoint(const Checkpoint& ckpt) {
  ModelConfig config;
  try {
    config = parse_config(ckpt.config_text);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config is invalid: ") + e.what());
  }
  net::Model<float> model(config, 0);
  restore(ckpt, model);
  return model;
}

}  // namespace nnformer::train
