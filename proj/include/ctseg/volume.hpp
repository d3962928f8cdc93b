#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ctseg/error.hpp"
#include "ctseg/rng.hpp"

namespace ctseg::vol {

// Axis convention: grids are stored row-major as (D,H,W) with x (width)
// fastest; an index triple is (z,y,x). Spacing is millimetres per voxel,
// ordered (z,y,x) to match. User-facing patch sizes are written HxWxD
// (e.g. 160x160x64); conversion to (D,H,W) happens at the config boundary.
struct Shape3 {
    int d = 0, h = 0, w = 0;
    bool operator==(const Shape3&) const = default;
    size_t numel() const { return size_t(d) * size_t(h) * size_t(w); }
};

struct Spacing3 {
    double z = 1.0, y = 1.0, x = 1.0;
    bool operator==(const Spacing3&) const = default;
};

std::string to_string(const Shape3& s);

class Volume3D {
public:
    Volume3D(Shape3 dims, Spacing3 spacing, std::vector<float> voxels);

    const Shape3& dims() const { return dims_; }
    const Spacing3& spacing() const { return spacing_; }
    const std::vector<float>& voxels() const { return voxels_; }
    std::vector<float>& voxels() { return voxels_; }

    float at(int z, int y, int x) const {
        return voxels_[(size_t(z) * dims_.h + y) * dims_.w + x];
    }
    float& at(int z, int y, int x) {
        return voxels_[(size_t(z) * dims_.h + y) * dims_.w + x];
    }

    bool operator==(const Volume3D&) const = default;

private:
    Shape3 dims_;
    Spacing3 spacing_;
    std::vector<float> voxels_;
};

class Mask3D {
public:
    Mask3D(Shape3 dims, Spacing3 spacing, std::vector<uint8_t> labels);

    const Shape3& dims() const { return dims_; }
    const Spacing3& spacing() const { return spacing_; }
    const std::vector<uint8_t>& labels() const { return labels_; }
    std::vector<uint8_t>& labels() { return labels_; }

    uint8_t at(int z, int y, int x) const {
        return labels_[(size_t(z) * dims_.h + y) * dims_.w + x];
    }
    uint8_t& at(int z, int y, int x) {
        return labels_[(size_t(z) * dims_.h + y) * dims_.w + x];
    }

    size_t foreground_count() const;
    bool empty_mask() const { return foreground_count() == 0; }

    bool operator==(const Mask3D&) const = default;

private:
    Shape3 dims_;
    Spacing3 spacing_;
    std::vector<uint8_t> labels_;
};

struct PatchPair {
    Volume3D image;
    std::optional<Mask3D> mask;       // absent for unlabeled data
    std::array<int, 3> origin{0, 0, 0};  // (z,y,x) offset in the source volume
};

// Five binary targets; level 0 is the full-resolution mask, each following
// level halves every spatial dim (ceil) via 2x2x2 max-pooling.
struct MultiScaleTarget {
    std::vector<Mask3D> targets;  // size 5
};

inline constexpr int kNumScales = 5;

// --- file I/O ------------------------------------------------------------

// .vol3: little-endian, magic "VOL3" | u32 version=1 | u8 kind
// (0=intensity, 1=mask) | u32 D,H,W | f64 sz,sy,sx | payload row-major
// (D,H,W): f32 for intensity, u8 for mask.
Volume3D load_volume(const std::filesystem::path& path);
Mask3D load_mask(const std::filesystem::path& path);
void save_volume(const Volume3D& v, const std::filesystem::path& path);
void save_mask(const Mask3D& m, const std::filesystem::path& path);

// --- preprocessing and sampling ------------------------------------------

Volume3D window_normalize(const Volume3D& v, double lo, double hi);

// Zero-pad symmetrically (low side gets the smaller half) to at least `size`.
Volume3D pad_to(const Volume3D& v, const Shape3& size);
Mask3D pad_to(const Mask3D& m, const Shape3& size);

// Uniformly random patch. When the mask is present, non-empty, and
// fg_bias > 0, a biased draw (probability fg_bias) retries until the patch
// contains at least one foreground voxel.
PatchPair sample_patch(const Volume3D& v, const Mask3D* m, const Shape3& size, Rng& rng,
                       double fg_bias = 0.0);

PatchPair augment_flip(const PatchPair& p, Rng& rng);
PatchPair augment_noise(const PatchPair& p, double sigma, Rng& rng);

MultiScaleTarget downsample_mask(const Mask3D& m);

// --- synthetic data -------------------------------------------------------

struct SyntheticParams {
    Shape3 dims{64, 64, 64};
    Spacing3 spacing{1.0, 1.0, 1.0};
    int n_blobs = 3;
    double noise = 0.03;        // white-noise sigma on the image
    double background = 0.30;   // base intensity
    double foreground = 0.65;   // blob intensity
};

std::pair<Volume3D, Mask3D> make_synthetic_case(Rng& rng, const SyntheticParams& params);

}  // namespace ctseg::vol
