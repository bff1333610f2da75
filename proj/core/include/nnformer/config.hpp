#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "nnformer/tensor.hpp"

namespace nnformer {

struct ModelConfig {
  std::string name = "custom";
  Extent3 crop_size{160, 160, 14};
  std::int64_t in_channels = 1;
  std::int64_t embed_dim = 96;
  std::array<std::int64_t, 4> stage_channels{96, 192, 384, 768};
  std::array<std::int64_t, 4> stage_heads{3, 6, 12, 24};
  std::array<Extent3, 2> embed_strides{Extent3{2, 2, 1}, Extent3{2, 2, 1}};
  std::array<Extent3, 3> down_strides{Extent3{2, 2, 1}, Extent3{2, 2, 2}, Extent3{2, 2, 2}};
  Extent3 volume_size{4, 4, 4};
  std::int64_t num_classes = 4;
  double mlp_ratio = 4.0;
  // Transformer layers per block at stages 0..3; 2 pairs a local layer with
  // a shifted one, 1 keeps the local layer only.
  std::array<std::int64_t, 4> blocks{2, 2, 2, 2};

  bool operator==(const ModelConfig&) const = default;

  Extent3 embed_reduction() const;
  // Throws ConfigError naming the offending field or stage.
  void validate() const;
};

// Bundled presets: tumor, synapse, acdc, toy, micro.
ModelConfig preset(std::string_view name);
std::vector<std::string> preset_names();

// `key = value` lines; triples are comma separated and lists of triples use
// ';' between them. '#' starts a comment. Every field must appear once.
ModelConfig parse_config(std::string_view text);
ModelConfig load_config(const std::string& path);
std::string config_to_text(const ModelConfig& config);

std::string format_double(double v);

}  // namespace nnformer
