#pragma once

#include <vector>

#include "covseg/image.hpp"

namespace covseg {

struct Components {
  std::vector<int> label;          // 0 = background, components numbered from 1
  std::vector<std::size_t> size;   // size[c - 1] voxels in component c
  std::vector<IndexBox> box;       // box[c - 1]
};

/// Connected components of the nonzero voxels with 6 or 26 connectivity,
/// numbered in scan order.
inline Components label_components(const Mask& m, int connectivity = 26) {
  const Geometry& g = m.geometry();
  Components out;
  out.label.assign(m.size(), 0);
  std::vector<std::size_t> stack;
  int next = 0;
  for (std::size_t seed = 0; seed < m.size(); ++seed) {
    if (!m[seed] || out.label[seed]) continue;
    ++next;
    std::size_t count = 0;
    IndexBox box;
    out.label[seed] = next;
    stack.push_back(seed);
    while (!stack.empty()) {
      const std::size_t n = stack.back();
      stack.pop_back();
      ++count;
      const Index3 p = g.unravel(n);
      box.expand(p[0], p[1], p[2]);
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
            if (manhattan == 0 || (connectivity == 6 && manhattan != 1)) continue;
            const int i = p[0] + dx, j = p[1] + dy, k = p[2] + dz;
            if (!g.contains(i, j, k)) continue;
            const std::size_t q = g.linear(i, j, k);
            if (m[q] && !out.label[q]) {
              out.label[q] = next;
              stack.push_back(q);
            }
          }
    }
    out.size.push_back(count);
    out.box.push_back(box);
  }
  return out;
}

}  // namespace covseg
