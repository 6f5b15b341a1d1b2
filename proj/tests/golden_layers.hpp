// Copyright (c) 2026 The arbq Authors.
// SPDX-License-Identifier: Apache-2.0

// Hand-built inputs for the golden container files in tests/golden.

#pragma once

#include <cstdint>
#include <vector>

#include "arbq/pipeline.hpp"

namespace arbq::golden {

// Hand-assembled bytes of a 2x2 float identity tensor.
inline std::vector<std::uint8_t> identity2x2_bytes() {
  return {'A', 'R', 'B', 'T',                       // magic
          1,   0,                                   // version
          0,                                        // dtype f32
          2,                                        // rank
          2,   0,   0,   0,   0,   0,   0,   0,     // rows
          2,   0,   0,   0,   0,   0,   0,   0,     // cols
          0x00, 0x00, 0x80, 0x3f, 0, 0, 0, 0,       // 1, 0
          0,   0,   0,   0,   0x00, 0x00, 0x80, 0x3f};  // 0, 1
}

// A 3 x 5 layer with block size 4, salient column 1, and scale values that
// are exact in float.
inline QuantizedLayer small_layer(Method method) {
  QuantizedLayer q;
  q.name = method == Method::kArbRc ? "golden.rc" : "golden.x";
  q.method = method;
  q.salient_order = 2;
  q.iterations = 15;
  q.block = 4;
  q.cgb = true;
  q.rows = 3;
  q.cols = 5;
  q.maps.salient_cols = BitMask(1, 5);
  q.maps.salient_cols.set(0, 1, true);
  q.maps.group = BitMask(3, 5);
  for (auto [r, c] : {std::pair{0, 0}, {0, 1}, {1, 3}, {2, 4}, {2, 1}})
    q.maps.group.set(static_cast<std::size_t>(r), static_cast<std::size_t>(c), true);
  q.plane1 = SignPlane(3, 5);
  q.plane2 = SignPlane(3, 5);
  q.plane2.fill(true);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 5; ++c) q.plane1.set(r, c, (r * 5 + c) % 3 != 0);
  q.plane2.set(0, 1, false);
  q.plane2.set(2, 1, false);

  float next = 0.25f;
  auto values = [&](std::size_t count) {
    std::vector<float> v(count);
    for (auto& x : v) {
      x = next;
      next += 0.125f;
    }
    return v;
  };
  for (std::size_t b0 = 0; b0 < 5; b0 += 4) {
    BlockParams bp;
    bp.begin = b0;
    bp.width = std::min<std::size_t>(4, 5 - b0);
    for (int z = 0; z < kZoneCount; ++z) {
      bool present = false;
      for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = b0; c < b0 + bp.width; ++c) present = present || zone_at(q.maps, r, c) == z;
      if (!present) continue;
      ZoneParams zp;
      zp.zone = z;
      zp.planes = zone_is_salient(z) ? 2 : 1;
      for (int p = 0; p < zp.planes; ++p) zp.alpha.push_back(values(3));
      if (method_has_mean(method)) zp.mu = values(3);
      if (method_has_col_scales(method))
        for (int p = 0; p < zp.planes; ++p) zp.alpha_c.push_back(values(bp.width));
      bp.zones.push_back(std::move(zp));
    }
    q.blocks.push_back(std::move(bp));
  }
  q.budget = layer_storage(q, 32);
  return q;
}

}  // namespace arbq::golden
