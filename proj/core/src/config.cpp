#include "nnformer/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "nnformer/errors.hpp"

namespace nnformer {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    parts.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

std::int64_t parse_int(std::string_view key, std::string_view s) {
  std::int64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError("config: " + std::string(key) + ": '" + std::string(s) + "' is not an integer");
  }
  return v;
}

double parse_real(std::string_view key, std::string_view s) {
  double v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError("config: " + std::string(key) + ": '" + std::string(s) + "' is not a number");
  }
  return v;
}

template <std::size_t N>
std::array<std::int64_t, N> parse_ints(std::string_view key, std::string_view s) {
  const auto parts = split(s, ',');
  if (parts.size() != N) {
    throw ConfigError("config: " + std::string(key) + " needs " + std::to_string(N) + " comma-separated values");
  }
  std::array<std::int64_t, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = parse_int(key, parts[i]);
  return out;
}

template <std::size_t N>
std::array<Extent3, N> parse_triples(std::string_view key, std::string_view s) {
  const auto parts = split(s, ';');
  if (parts.size() != N) {
    throw ConfigError("config: " + std::string(key) + " needs " + std::to_string(N) + " ';'-separated triples");
  }
  std::array<Extent3, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = parse_ints<3>(key, parts[i]);
  return out;
}

template <std::size_t N>
std::string join(const std::array<std::int64_t, N>& v) {
  std::string s;
  for (std::size_t i = 0; i < N; ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

template <std::size_t N>
std::string join_triples(const std::array<Extent3, N>& v) {
  std::string s;
  for (std::size_t i = 0; i < N; ++i) s += (i ? " ; " : "") + join(v[i]);
  return s;
}

void check_strides(const char* field, std::size_t index, const Extent3& s) {
  for (int a = 0; a < 3; ++a) {
    if (s[a] != 1 && s[a] != 2) {
      throw ConfigError(std::string("config: ") + field + "[" + std::to_string(index) + "] = " + to_string(s) +
                        ": strides must be 1 or 2");
    }
  }
}

const std::vector<std::string> kKeys{"crop_size",   "in_channels", "embed_dim",  "stage_channels",
                                     "stage_heads", "embed_strides", "down_strides", "volume_size",
                                     "num_classes", "mlp_ratio",   "blocks"};

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

Extent3 ModelConfig::embed_reduction() const {
  return {embed_strides[0][0] * embed_strides[1][0], embed_strides[0][1] * embed_strides[1][1],
          embed_strides[0][2] * embed_strides[1][2]};
}

void ModelConfig::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (crop_size[a] < 1) throw ConfigError("config: crop_size " + to_string(crop_size) + " must be positive");
    if (volume_size[a] < 1) throw ConfigError("config: volume_size " + to_string(volume_size) + " must be positive");
  }
  if (in_channels < 1) throw ConfigError("config: in_channels must be positive");
  if (num_classes < 1) throw ConfigError("config: num_classes must be positive");
  if (embed_dim < 2 || embed_dim % 2 != 0) throw ConfigError("config: embed_dim must be even and positive");
  if (!(mlp_ratio > 0.0)) throw ConfigError("config: mlp_ratio must be positive");
  for (std::size_t i = 0; i < 4; ++i) {
    const std::int64_t expect = embed_dim << i;
    if (stage_channels[i] != expect) {
      throw ConfigError("config: stage_channels[" + std::to_string(i) + "] = " + std::to_string(stage_channels[i]) +
                        ", expected " + std::to_string(expect) + " (doubling from embed_dim)");
    }
    if (stage_heads[i] < 1 || stage_channels[i] % stage_heads[i] != 0) {
      throw ConfigError("config: stage " + std::to_string(i) + ": " + std::to_string(stage_channels[i]) +
                        " channels do not split into " + std::to_string(stage_heads[i]) + " heads");
    }
    if (blocks[i] != 1 && blocks[i] != 2) {
      throw ConfigError("config: blocks[" + std::to_string(i) + "] must be 1 or 2");
    }
  }
  for (std::size_t i = 0; i < 2; ++i) check_strides("embed_strides", i, embed_strides[i]);
  for (std::size_t i = 0; i < 3; ++i) check_strides("down_strides", i, down_strides[i]);

  // Stride 2 on an axis already reduced to one voxel cannot shrink it further.
  Extent3 e = crop_size;
  auto apply = [&e](const Extent3& s, const std::string& where) {
    for (int a = 0; a < 3; ++a) {
      if (s[a] == 2 && e[a] == 1) {
        throw ConfigError("config: " + where + " over-down-samples axis " + "HWD"[a] + " at extent " + to_string(e));
      }
      e[a] = (e[a] - 1) / s[a] + 1;
    }
  };
  apply(embed_strides[0], "embedding conv 1");
  apply(embed_strides[1], "embedding conv 3");
  for (std::size_t i = 0; i < 3; ++i) apply(down_strides[i], "down-sampling layer " + std::to_string(i));
}

ModelConfig preset(std::string_view name) {
  ModelConfig c;
  c.name = std::string(name);
  if (name == "synapse") {
    c.crop_size = {128, 128, 64};
    c.embed_dim = 192;
    c.stage_heads = {6, 12, 24, 48};
    c.embed_strides = {Extent3{2, 2, 2}, Extent3{2, 2, 1}};
    c.down_strides = {Extent3{2, 2, 2}, Extent3{2, 2, 2}, Extent3{2, 2, 2}};
    c.num_classes = 9;
  } else if (name == "acdc") {
    c.crop_size = {160, 160, 14};
    c.embed_dim = 96;
    c.stage_heads = {3, 6, 12, 24};
    c.embed_strides = {Extent3{2, 2, 1}, Extent3{2, 2, 1}};
    c.down_strides = {Extent3{2, 2, 1}, Extent3{2, 2, 2}, Extent3{2, 2, 2}};
    c.num_classes = 4;
  } else if (name == "tumor") {
    c.crop_size = {128, 128, 128};
    c.in_channels = 4;
    c.embed_dim = 96;
    c.stage_heads = {3, 6, 12, 24};
    c.embed_strides = {Extent3{2, 2, 2}, Extent3{2, 2, 2}};
    c.down_strides = {Extent3{2, 2, 2}, Extent3{2, 2, 2}, Extent3{2, 2, 2}};
    c.num_classes = 4;
  } else if (name == "toy") {
    c.crop_size = {32, 32, 16};
    c.embed_dim = 16;
    c.stage_heads = {1, 2, 4, 8};
    c.embed_strides = {Extent3{2, 2, 1}, Extent3{2, 2, 2}};
    c.down_strides = {Extent3{2, 2, 2}, Extent3{2, 2, 2}, Extent3{2, 2, 2}};
    c.num_classes = 3;
  } else if (name == "micro") {
    c.crop_size = {8, 8, 8};
    c.embed_dim = 8;
    c.stage_heads = {1, 1, 1, 1};
    c.embed_strides = {Extent3{2, 2, 2}, Extent3{1, 1, 1}};
    c.down_strides = {Extent3{2, 2, 2}, Extent3{2, 2, 2}, Extent3{1, 1, 1}};
    c.volume_size = {2, 2, 2};
    c.num_classes = 2;
    c.mlp_ratio = 2.0;
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "'");
  }
  for (std::size_t i = 0; i < 4; ++i) c.stage_channels[i] = c.embed_dim << i;
  return c;
}

std::vector<std::string> preset_names() { return {"acdc", "micro", "synapse", "toy", "tumor"}; }

ModelConfig parse_config(std::string_view text) {
  std::map<std::string, std::string, std::less<>> values;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    if (key != "name" && std::find(kKeys.begin(), kKeys.end(), key) == kKeys.end()) {
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    if (!values.emplace(key, value).second) {
      throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
  }
  for (const auto& k : kKeys) {
    if (!values.contains(k)) throw ConfigError("config: missing key '" + k + "'");
  }
  ModelConfig c;
  c.name = values.contains("name") ? values["name"] : "custom";
  c.crop_size = parse_ints<3>("crop_size", values["crop_size"]);
  c.in_channels = parse_int("in_channels", values["in_channels"]);
  c.embed_dim = parse_int("embed_dim", values["embed_dim"]);
  c.stage_channels = parse_ints<4>("stage_channels", values["stage_channels"]);
  c.stage_heads = parse_ints<4>("stage_heads", values["stage_heads"]);
  c.embed_strides = parse_triples<2>("embed_strides", values["embed_strides"]);
  c.down_strides = parse_triples<3>("down_strides", values["down_strides"]);
  c.volume_size = parse_ints<3>("volume_size", values["volume_size"]);
  c.num_classes = parse_int("num_classes", values["num_classes"]);
  c.mlp_ratio = parse_real("mlp_ratio", values["mlp_ratio"]);
  c.blocks = parse_ints<4>("blocks", values["blocks"]);
  c.validate();
  return c;
}

ModelConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_text(const ModelConfig& c) {
  std::ostringstream out;
  out << "name = " << c.name << '\n'
      << "crop_size = " << join(c.crop_size) << '\n'
      << "in_channels = " << c.in_channels << '\n'
      << "embed_dim = " << c.embed_dim << '\n'
      << "stage_channels = " << join(c.stage_channels) << '\n'
      << "stage_heads = " << join(c.stage_heads) << '\n'
      << "embed_strides = " << join_triples(c.embed_strides) << '\n'
      << "down_strides = " << join_triples(c.down_strides) << '\n'
      << "volume_size = " << join(c.volume_size) << '\n'
      << "num_classes = " << c.num_classes << '\n'
      << "mlp_ratio = " << format_double(c.mlp_ratio) << '\n'
      << "blocks = " << join(c.blocks) << '\n';
  return out.str();
}

}  // namespace nnformer
