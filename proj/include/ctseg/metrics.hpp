#pragma once

#include <array>
#include <string>
#include <vector>

#include "ctseg/volume.hpp"

// Volume-wise evaluation: Dice, Jaccard, normalized surface dice (NSD),
// average distance of boundaries (ADB) and 95th-percentile Hausdorff
// distance (HD95). Surfaces are 6-connectivity boundary voxels with the
// image border treated as background; distances are measured in mm between
// voxel centres using the grid spacing.
namespace ctseg::metrics {

using vol::Mask3D;
using vol::Shape3;
using vol::Spacing3;

struct SurfaceSet {
    std::vector<std::array<int, 3>> voxels;  // (z,y,x)
    Shape3 dims;
    Spacing3 spacing;

    bool empty() const { return voxels.empty(); }
};

SurfaceSet extract_surface(const Mask3D& m);

// Squared Euclidean distance (mm^2) from every voxel centre to the nearest
// surface voxel centre; exact separable transform. All-infinity for an
// empty surface.
std::vector<double> surface_sqdist_field(const SurfaceSet& s);

std::pair<double, double> dice_jaccard(const Mask3D& p, const Mask3D& g);

double nsd(const Mask3D& p, const Mask3D& g, double tau_mm);

// Throw DegenerateCase if either mask is empty: no finite distance exists.
double adb(const Mask3D& p, const Mask3D& g);
double hd95(const Mask3D& p, const Mask3D& g);

// Linear-interpolation percentile of unsorted values, pct in [0,100].
double percentile_linear(std::vector<double> values, double pct);

struct MetricsReport {
    double dice = 0.0;
    double jaccard = 0.0;
    double nsd = 0.0;
    double adb_mm = 0.0;   // NaN when distances_degenerate
    double hd95_mm = 0.0;  // NaN when distances_degenerate
    bool both_empty = false;
    bool distances_degenerate = false;  // exactly one side empty

    std::string flags() const;
};

MetricsReport evaluate_case(const Mask3D& p, const Mask3D& g, double tau_mm = 3.0);

struct Aggregate {
    struct Stat {
        double mean = 0.0;
        double variance = 0.0;  // population variance
        size_t count = 0;
        size_t excluded = 0;
    };
    Stat dice, jaccard, nsd, adb_mm, hd95_mm;
};

Aggregate aggregate(const std::vector<MetricsReport>& reports);

}  // namespace ctseg::metrics
