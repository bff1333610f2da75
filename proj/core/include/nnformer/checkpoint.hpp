#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "nnformer/model.hpp"
#include "nnformer/optim.hpp"

namespace nnformer::train {

struct ArrayEntry {
  std::string name;
  Shape extents;
  std::vector<float> values;

  bool operator==(const ArrayEntry&) const = default;
};

// File layout, little-endian:
//   "NNF1"
//   u32 count, then count entries of
//     u32 name_len, name, u8 dtype (1 f32, 2 utf8), u32 rank, rank x u64 extent, payload
//   (the first entry is "__config__", a utf8 config text)
//   u32 count, then the optimizer velocity entries
//   u64 rng state, u64 epoch
struct Checkpoint {
  std::string config_text;
  std::vector<ArrayEntry> parameters;
  std::vector<ArrayEntry> velocity;
  std::uint64_t rng_state = 0;
  std::uint64_t epoch = 0;

  bool operator==(const Checkpoint&) const = default;
};

std::string serialize(const Checkpoint& ckpt);
// Throws FormatError on a bad tag, truncation, unknown dtype or trailing bytes.
Checkpoint deserialize(std::string_view bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Snapshot of model parameters, optional optimizer velocity and loop state.
Checkpoint capture(const net::Model<float>& model, const Sgd<float>* optimizer, std::uint64_t rng_state,
                   std::uint64_t epoch);

// Copies parameters (and velocity when `optimizer` is given) into place.
// Throws ConfigError when the checkpoint was written for another config and
// FormatError when names or shapes disagree.
void restore(const Checkpoint& ckpt, net::Model<float>& model, Sgd<float>* optimizer = nullptr);

// Builds a model from the embedded config and restores its parameters.
net::Model<float> model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace nnformer::train
