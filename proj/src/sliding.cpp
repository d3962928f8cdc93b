#include "ctseg/sliding.hpp"

#include <algorithm>
#include <cmath>

namespace ctseg::tile {

namespace {

std::vector<int> axis_origins(int dim, int window) {
    std::vector<int> out;
    const int stride = std::max(1, window / 2);
    for (int o = 0;; o += stride) {
        if (o + window >= dim) {
            out.push_back(dim - window);
            break;
        }
        out.push_back(o);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

}  // namespace

TilePlan tile_positions(const Shape3& dims, const Shape3& window) {
    if (window.d > dims.d || window.h > dims.h || window.w > dims.w)
        throw ShapeError("tile_positions: window " + vol::to_string(window) +
                         " exceeds volume dims " + vol::to_string(dims) + "; pad first");
    TilePlan plan;
    plan.window = window;
    const auto zs = axis_origins(dims.d, window.d);
    const auto ys = axis_origins(dims.h, window.h);
    const auto xs = axis_origins(dims.w, window.w);
    for (int z : zs)
        for (int y : ys)
            for (int x : xs) plan.origins.push_back({z, y, x});
    return plan;
}

Volume3D stitch(const std::vector<Tensor<float>>& tiles, const TilePlan& plan,
                const Shape3& dims, const Spacing3& spacing) {
    if (tiles.size() != plan.origins.size())
        throw MissingTile("stitch: got " + std::to_string(tiles.size()) + " tiles for " +
                          std::to_string(plan.origins.size()) + " origins");
    const Shape3& w = plan.window;
    for (const auto& t : tiles)
        if (t.rank() != 4 || t.dim(0) != 1 || t.dim(1) != w.d || t.dim(2) != w.h ||
            t.dim(3) != w.w)
            throw ShapeError("stitch: tile dims " + t.shape_str() + " != window " +
                             vol::to_string(w));

    std::vector<float> sum(dims.numel(), 0.0f);
    std::vector<uint16_t> count(dims.numel(), 0);
    for (size_t i = 0; i < tiles.size(); ++i) {
        const auto& o = plan.origins[i];
        const float* src = tiles[i].data();
        for (int z = 0; z < w.d; ++z)
            for (int y = 0; y < w.h; ++y) {
                const size_t dst = (size_t(o[0] + z) * dims.h + (o[1] + y)) * dims.w + o[2];
                const size_t sof = (size_t(z) * w.h + y) * w.w;
                for (int x = 0; x < w.w; ++x) {
                    sum[dst + size_t(x)] += src[sof + size_t(x)];
                    ++count[dst + size_t(x)];
                }
            }
    }
    for (size_t i = 0; i < sum.size(); ++i) {
        if (count[i] == 0) throw MissingTile("stitch: uncovered voxel; tile plan incomplete");
        sum[i] /= float(count[i]);
    }
    return Volume3D(dims, spacing, std::move(sum));
}

Prediction predict_volume(const Volume3D& v, const TileFn& evaluate, const Shape3& window,
                          const PredictOptions& opts) {
    const Volume3D padded = vol::pad_to(v, window);
    const Shape3 pdims = padded.dims();
    const TilePlan plan = tile_positions(pdims, window);

    std::vector<Tensor<float>> tiles;
    tiles.reserve(plan.origins.size());
    for (const auto& o : plan.origins) {
        Tensor<float> block({1, window.d, window.h, window.w});
        for (int z = 0; z < window.d; ++z)
            for (int y = 0; y < window.h; ++y) {
                const float* src =
                    &padded.voxels()[(size_t(o[0] + z) * pdims.h + (o[1] + y)) * pdims.w + o[2]];
                std::copy(src, src + window.w,
                          block.data() + (size_t(z) * window.h + y) * window.w);
            }
        Tensor<float> prob = evaluate(block);
        if (prob.rank() != 4 || prob.dim(0) != 1 || prob.dim(1) != window.d ||
            prob.dim(2) != window.h || prob.dim(3) != window.w)
            throw ShapeError("predict_volume: evaluator returned " + prob.shape_str() +
                             " for window " + vol::to_string(window));
        tiles.push_back(std::move(prob));
    }

    Volume3D prob = stitch(tiles, plan, pdims, v.spacing());

    // crop padding back off
    const Shape3 odims = v.dims();
    const int z0 = (pdims.d - odims.d) / 2, y0 = (pdims.h - odims.h) / 2,
              x0 = (pdims.w - odims.w) / 2;
    std::vector<float> pv(odims.numel());
    std::vector<uint8_t> mv(odims.numel());
    for (int z = 0; z < odims.d; ++z)
        for (int y = 0; y < odims.h; ++y)
            for (int x = 0; x < odims.w; ++x) {
                const float p = prob.at(z0 + z, y0 + y, x0 + x);
                pv[(size_t(z) * odims.h + y) * odims.w + x] = p;
                mv[(size_t(z) * odims.h + y) * odims.w + x] = p > float(opts.threshold) ? 1 : 0;
            }
    return {Mask3D(odims, v.spacing(), std::move(mv)),
            Volume3D(odims, v.spacing(), std::move(pv))};
}

}  // namespace ctseg::tile
