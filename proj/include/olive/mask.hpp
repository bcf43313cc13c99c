#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "olive/error.hpp"

namespace olive {

enum class MaskSource { PatchNative, Rasterized };

/// n x n binary occupancy over the patch grid, row-major. Always has at
/// least one set bit.
class ObjectMask {
 public:
  ObjectMask() = default;

  static ObjectMask from_bits(std::size_t n, std::vector<std::uint8_t> bits,
                              MaskSource source = MaskSource::PatchNative) {
    require(n >= 1, ErrorCode::Shape, "mask grid size must be >= 1");
    require(bits.size() == n * n, ErrorCode::Shape,
            "mask has " + std::to_string(bits.size()) + " bits, expected " + std::to_string(n * n));
    for (auto& b : bits) b = b ? 1 : 0;
    ObjectMask m;
    m.n_ = n;
    m.bits_ = std::move(bits);
    m.source_ = source;
    require(m.popcount() > 0, ErrorCode::EmptyMask, "mask selects no patches");
    return m;
  }

  static ObjectMask from_indices(std::size_t n, std::span<const std::size_t> patches) {
    std::vector<std::uint8_t> bits(n * n, 0);
    for (auto p : patches) {
      require(p < n * n, ErrorCode::Shape, "patch index " + std::to_string(p) + " outside grid");
      bits[p] = 1;
    }
    return from_bits(n, std::move(bits));
  }

  static ObjectMask full(std::size_t n) { return from_bits(n, std::vector<std::uint8_t>(n * n, 1)); }

  std::size_t n() const noexcept { return n_; }
  const std::vector<std::uint8_t>& bits() const noexcept { return bits_; }
  MaskSource source() const noexcept { return source_; }
  bool at(std::size_t r, std::size_t c) const { return bits_[r * n_ + c] != 0; }

  std::size_t popcount() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
  }

  /// Set patch indices in ascending row-major order.
  std::vector<std::size_t> indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < bits_.size(); ++i)
      if (bits_[i]) out.push_back(i);
    return out;
  }

  friend bool operator==(const ObjectMask& a, const ObjectMask& b) { return a.n_ == b.n_ && a.bits_ == b.bits_; }

 private:
  std::size_t n_ = 0;
  std::vector<std::uint8_t> bits_;
  MaskSource source_ = MaskSource::PatchNative;
};

// Run-length encoding over the n^2 row-major grid: alternating run lengths,
// starting with a (possibly zero-length) run of unset bits.

inline std::vector<std::uint32_t> encode_rle(const ObjectMask& mask) {
  std::vector<std::uint32_t> runs;
  std::uint8_t current = 0;
  std::uint32_t length = 0;
  for (auto b : mask.bits()) {
    if (b != current) {
      runs.push_back(length);
      current = b;
      length = 0;
    }
    ++length;
  }
  runs.push_back(length);
  return runs;
}

inline ObjectMask decode_rle(std::span<const std::uint32_t> runs) {
  std::uint64_t total = 0;
  for (auto r : runs) total += r;
  const auto n = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(total))));
  require(total > 0 && n * n == total, ErrorCode::Shape,
          "mask_rle covers " + std::to_string(total) + " cells, which is not a square grid");
  std::vector<std::uint8_t> bits;
  bits.reserve(total);
  std::uint8_t value = 0;
  for (auto r : runs) {
    bits.insert(bits.end(), r, value);
    value ^= 1;
  }
  return ObjectMask::from_bits(n, std::move(bits));
}

/// Patch bit set iff the object covers at least half of that patch's pixels.
inline ObjectMask rasterize_pixels(std::span<const std::uint8_t> pixels, std::size_t height, std::size_t width,
                                   std::size_t n) {
  require(n >= 1 && height % n == 0 && width % n == 0, ErrorCode::Shape,
          "pixel mask " + std::to_string(height) + "x" + std::to_string(width) + " is not divisible into " +
              std::to_string(n) + "x" + std::to_string(n) + " patches");
  require(pixels.size() == height * width, ErrorCode::Shape, "pixel mask size does not match its extent");
  const std::size_t ph = height / n, pw = width / n;
  std::vector<std::uint8_t> bits(n * n, 0);
  for (std::size_t pr = 0; pr < n; ++pr) {
    for (std::size_t pc = 0; pc < n; ++pc) {
      std::size_t covered = 0;
      for (std::size_t y = pr * ph; y < (pr + 1) * ph; ++y)
        for (std::size_t x = pc * pw; x < (pc + 1) * pw; ++x) covered += pixels[y * width + x] ? 1 : 0;
      bits[pr * n + pc] = 2 * covered >= ph * pw ? 1 : 0;
    }
  }
  require(std::find(bits.begin(), bits.end(), 1) != bits.end(), ErrorCode::EmptyMask,
          "no patch is at least half covered by the object");
  return ObjectMask::from_bits(n, std::move(bits), MaskSource::Rasterized);
}

struct Point {
  double x = 0;
  double y = 0;
};

namespace detail {

inline double polygon_area(const std::vector<Point>& poly) {
  double twice = 0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const auto& a = poly[i];
    const auto& b = poly[(i + 1) % poly.size()];
    twice += a.x * b.y - b.x * a.y;
  }
  return std::abs(twice) / 2;
}

// Sutherland-Hodgman against an axis-aligned box; exact area for simple
// subject polygons because the clip window is convex.
inline std::vector<Point> clip_to_box(std::vector<Point> poly, double x0, double y0, double x1, double y1) {
  auto clip = [&](auto inside, auto intersect) {
    std::vector<Point> out;
    for (std::size_t i = 0; i < poly.size(); ++i) {
      const Point cur = poly[i];
      const Point prev = poly[(i + poly.size() - 1) % poly.size()];
      const bool cin = inside(cur), pin = inside(prev);
      if (cin) {
        if (!pin) out.push_back(intersect(prev, cur));
        out.push_back(cur);
      } else if (pin) {
        out.push_back(intersect(prev, cur));
      }
    }
    poly = std::move(out);
  };
  auto at_x = [](double xc) {
    return [xc](Point a, Point b) { return Point{xc, a.y + (b.y - a.y) * (xc - a.x) / (b.x - a.x)}; };
  };
  auto at_y = [](double yc) {
    return [yc](Point a, Point b) { return Point{a.x + (b.x - a.x) * (yc - a.y) / (b.y - a.y), yc}; };
  };
  clip([&](Point p) { return p.x >= x0; }, at_x(x0));
  if (poly.empty()) return poly;
  clip([&](Point p) { return p.x <= x1; }, at_x(x1));
  if (poly.empty()) return poly;
  clip([&](Point p) { return p.y >= y0; }, at_y(y0));
  if (poly.empty()) return poly;
  clip([&](Point p) { return p.y <= y1; }, at_y(y1));
  return poly;
}

}  // namespace detail

/// Polygon in image coordinates (x right, y down) over a width x height
/// image; uses the same half-coverage rule as rasterize_pixels.
inline ObjectMask rasterize_polygon(std::span<const Point> polygon, double width, double height, std::size_t n) {
  require(n >= 1 && width > 0 && height > 0, ErrorCode::Shape, "polygon raster extent must be positive");
  require(polygon.size() >= 3, ErrorCode::Shape, "polygon needs at least 3 vertices");
  const std::vector<Point> poly(polygon.begin(), polygon.end());
  const double pw = width / static_cast<double>(n), ph = height / static_cast<double>(n);
  std::vector<std::uint8_t> bits(n * n, 0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      const auto clipped = detail::clip_to_box(poly, c * pw, r * ph, (c + 1) * pw, (r + 1) * ph);
      const double cover = clipped.size() >= 3 ? detail::polygon_area(clipped) / (pw * ph) : 0.0;
      bits[r * n + c] = cover >= 0.5 - 1e-12 ? 1 : 0;
    }
  }
  require(std::find(bits.begin(), bits.end(), 1) != bits.end(), ErrorCode::EmptyMask,
          "no patch is at least half covered by the polygon");
  return ObjectMask::from_bits(n, std::move(bits), MaskSource::Rasterized);
}

}  // namespace olive
