#pragma once

#include <functional>
#include <vector>

#include "ctseg/tensor.hpp"
#include "ctseg/volume.hpp"

namespace ctseg::tile {

using vol::Mask3D;
using vol::Shape3;
using vol::Spacing3;
using vol::Volume3D;

struct TilePlan {
    Shape3 window;
    std::vector<std::array<int, 3>> origins;  // (z,y,x), in-bounds, full coverage
};

// 50% overlap tiling: per axis origins 0, s, 2s, ... with s = window/2; the
// final origin is clamped to dims - window; duplicates removed.
TilePlan tile_positions(const Shape3& dims, const Shape3& window);

// Per-voxel arithmetic mean of all covering tiles. One probability block of
// exactly `window` dims is required per plan origin, in order.
Volume3D stitch(const std::vector<Tensor<float>>& tiles, const TilePlan& plan,
                const Shape3& dims, const Spacing3& spacing);

// Evaluates one window: input block (D,H,W) as (1,D,H,W) tensor is produced
// by the caller; the function returns the full-resolution probability map.
using TileFn = std::function<Tensor<float>(const Tensor<float>& block)>;

struct PredictOptions {
    double threshold = 0.5;
};

struct Prediction {
    Mask3D mask;
    Volume3D probability;
};

// Tile -> evaluate -> stitch -> threshold. Volumes smaller than the window
// are zero-padded for evaluation and the outputs cropped back.
Prediction predict_volume(const Volume3D& v, const TileFn& evaluate, const Shape3& window,
                          const PredictOptions& opts = {});

}  // namespace ctseg::tile
