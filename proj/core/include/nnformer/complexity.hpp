#pragma once

#include <cstdint>

#include "nnformer/tensor.hpp"

// Closed-form multiply-accumulate counts of one attention layer over an
// h x w x d token grid with C channels. Each counts the Q/K/V/output
// projections and the two attention products.
namespace nnformer::attention {

// 4hwdC^2 + 2 S_H S_W S_D hwdC
std::uint64_t omega_lv(std::int64_t h, std::int64_t w, std::int64_t d, std::int64_t channels, Extent3 volume);

// 4hwdC^2 + 2 (hwd)^2 C
std::uint64_t omega_gv(std::int64_t h, std::int64_t w, std::int64_t d, std::int64_t channels);

// 3hwdC^2 + 2 S_H S_W S_D hwdC: one C -> 2C key-value projection and the
// output projection; queries are not projected.
std::uint64_t omega_skip(std::int64_t h, std::int64_t w, std::int64_t d, std::int64_t channels, Extent3 volume);

}  // namespace nnformer::attention
