#include "nnformer/complexity.hpp"

#include <string>

#include "nnformer/errors.hpp"

namespace nnformer::attention {

namespace {

std::uint64_t checked(std::int64_t v, const char* what) {
  if (v < 1) throw ConfigError(std::string("complexity: ") + what + " must be positive");
  return static_cast<std::uint64_t>(v);
}

std::uint64_t grid(std::int64_t h, std::int64_t w, std::int64_t d) {
  return checked(h, "h") * checked(w, "w") * checked(d, "d");
}

std::uint64_t tokens(Extent3 volume) {
  return checked(volume[0], "S_H") * checked(volume[1], "S_W") * checked(volume[2], "S_D");
}

}  // namespace

std::uint64_t omega_lv(std::int64_t h, std::int64_t w, std::int64_t d, std::int64_t channels, Extent3 volume) {
  const std::uint64_t n = grid(h, w, d), c = checked(channels, "C");
  return 4 * n * c * c + 2 * tokens(volume) * n * c;
}

std::uint64_t omega_gv(std::int64_t h, std::int64_t w, std::int64_t d, std::int64_t channels) {
  const std::uint64_t n = grid(h, w, d), c = checked(channels, "C");
  return 4 * n * c * c + 2 * n * n * c;
}

std::uint64_t omega_skip(std::int64_t h, std::int64_t w, std::int64_t d, std::int64_t channels, Extent3 volume) {
  const std::uint64_t n = grid(h, w, d), c = checked(channels, "C");
  return 3 * n * c * c + 2 * tokens(volume) * n * c;
}

}  // namespace nnformer::attention
