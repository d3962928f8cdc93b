#include "ctseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ctseg::metrics {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_aligned(const Mask3D& p, const Mask3D& g, const char* where) {
    if (p.dims() != g.dims())
        throw ShapeError(std::string(where) + ": mask dims differ: " + vol::to_string(p.dims()) +
                         " vs " + vol::to_string(g.dims()));
    if (!(p.spacing() == g.spacing()))
        throw ShapeError(std::string(where) + ": mask spacings differ");
}

// One pass of the exact lower-envelope distance transform along a line:
// d[q] = min_i ( f[i] + w*(q-i)^2 ). Samples at infinity are skipped.
void dt_1d(const double* f, double* d, int n, double w, int* v, double* z) {
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (f[q] == kInf) continue;
        double s = 0.0;
        while (k >= 0) {
            s = ((f[q] + w * q * q) - (f[v[k]] + w * v[k] * v[k])) /
                (2.0 * w * double(q - v[k]));
            if (s <= z[k])
                --k;
            else
                break;
        }
        ++k;
        v[k] = q;
        z[k] = (k == 0) ? -kInf : s;
        z[k + 1] = kInf;
    }
    if (k < 0) {
        for (int q = 0; q < n; ++q) d[q] = kInf;
        return;
    }
    int j = 0;
    for (int q = 0; q < n; ++q) {
        while (z[j + 1] < q) ++j;
        const double dq = double(q - v[j]);
        d[q] = f[v[j]] + w * dq * dq;
    }
}

}  // namespace

SurfaceSet extract_surface(const Mask3D& m) {
    SurfaceSet s;
    s.dims = m.dims();
    s.spacing = m.spacing();
    const Shape3 d = m.dims();
    for (int z = 0; z < d.d; ++z)
        for (int y = 0; y < d.h; ++y)
            for (int x = 0; x < d.w; ++x) {
                if (!m.at(z, y, x)) continue;
                const bool border =
                    (z == 0 || !m.at(z - 1, y, x)) || (z == d.d - 1 || !m.at(z + 1, y, x)) ||
                    (y == 0 || !m.at(z, y - 1, x)) || (y == d.h - 1 || !m.at(z, y + 1, x)) ||
                    (x == 0 || !m.at(z, y, x - 1)) || (x == d.w - 1 || !m.at(z, y, x + 1));
                if (border) s.voxels.push_back({z, y, x});
            }
    return s;
}

std::vector<double> surface_sqdist_field(const SurfaceSet& s) {
    const Shape3 d = s.dims;
    std::vector<double> field(d.numel(), kInf);
    for (const auto& v : s.voxels)
        field[(size_t(v[0]) * d.h + v[1]) * d.w + v[2]] = 0.0;
    if (s.voxels.empty()) return field;

    const int n_max = std::max({d.d, d.h, d.w});
    std::vector<double> f(size_t{0}), out, z;
    f.resize(size_t(n_max));
    out.resize(size_t(n_max));
    z.resize(size_t(n_max) + 1);
    std::vector<int> v;
    v.resize(size_t(n_max));

    const double wx = s.spacing.x * s.spacing.x;
    const double wy = s.spacing.y * s.spacing.y;
    const double wz = s.spacing.z * s.spacing.z;

    // x lines
    for (int zz = 0; zz < d.d; ++zz)
        for (int yy = 0; yy < d.h; ++yy) {
            double* row = &field[(size_t(zz) * d.h + yy) * d.w];
            dt_1d(row, out.data(), d.w, wx, v.data(), z.data());
            std::copy(out.begin(), out.begin() + d.w, row);
        }
    // y lines
    for (int zz = 0; zz < d.d; ++zz)
        for (int xx = 0; xx < d.w; ++xx) {
            for (int yy = 0; yy < d.h; ++yy) f[size_t(yy)] = field[(size_t(zz) * d.h + yy) * d.w + xx];
            dt_1d(f.data(), out.data(), d.h, wy, v.data(), z.data());
            for (int yy = 0; yy < d.h; ++yy) field[(size_t(zz) * d.h + yy) * d.w + xx] = out[size_t(yy)];
        }
    // z lines
    for (int yy = 0; yy < d.h; ++yy)
        for (int xx = 0; xx < d.w; ++xx) {
            for (int zz = 0; zz < d.d; ++zz) f[size_t(zz)] = field[(size_t(zz) * d.h + yy) * d.w + xx];
            dt_1d(f.data(), out.data(), d.d, wz, v.data(), z.data());
            for (int zz = 0; zz < d.d; ++zz) field[(size_t(zz) * d.h + yy) * d.w + xx] = out[size_t(zz)];
        }
    return field;
}

std::pair<double, double> dice_jaccard(const Mask3D& p, const Mask3D& g) {
    check_aligned(p, g, "dice_jaccard");
    size_t np = 0, ng = 0, inter = 0;
    const auto& lp = p.labels();
    const auto& lg = g.labels();
    for (size_t i = 0; i < lp.size(); ++i) {
        np += lp[i];
        ng += lg[i];
        inter += size_t(lp[i] & lg[i]);
    }
    if (np == 0 && ng == 0) return {1.0, 1.0};  // both empty: perfect agreement
    const size_t uni = np + ng - inter;
    const double dice = 2.0 * double(inter) / double(np + ng);
    const double jac = uni ? double(inter) / double(uni) : 1.0;
    return {dice, jac};
}

namespace {

struct SurfacePair {
    SurfaceSet sp, sg;
    // squared distances from each surface voxel to the other surface
    std::vector<double> p_to_g, g_to_p;
};

SurfacePair surface_distances(const Mask3D& p, const Mask3D& g) {
    SurfacePair r;
    r.sp = extract_surface(p);
    r.sg = extract_surface(g);
    if (!r.sp.empty() && !r.sg.empty()) {
        const auto field_g = surface_sqdist_field(r.sg);
        const auto field_p = surface_sqdist_field(r.sp);
        const Shape3 d = p.dims();
        r.p_to_g.reserve(r.sp.voxels.size());
        for (const auto& v : r.sp.voxels)
            r.p_to_g.push_back(field_g[(size_t(v[0]) * d.h + v[1]) * d.w + v[2]]);
        r.g_to_p.reserve(r.sg.voxels.size());
        for (const auto& v : r.sg.voxels)
            r.g_to_p.push_back(field_p[(size_t(v[0]) * d.h + v[1]) * d.w + v[2]]);
    }
    return r;
}

}  // namespace

double nsd(const Mask3D& p, const Mask3D& g, double tau_mm) {
    check_aligned(p, g, "nsd");
    if (tau_mm < 0.0) throw DomainError("nsd: tau must be >= 0");
    const auto d = surface_distances(p, g);
    if (d.sp.empty() && d.sg.empty()) return 1.0;
    if (d.sp.empty() || d.sg.empty()) return 0.0;
    const double tau2 = tau_mm * tau_mm;
    size_t close = 0;
    for (double q : d.p_to_g) close += size_t(q <= tau2);
    for (double q : d.g_to_p) close += size_t(q <= tau2);
    return double(close) / double(d.sp.voxels.size() + d.sg.voxels.size());
}

double adb(const Mask3D& p, const Mask3D& g) {
    check_aligned(p, g, "adb");
    const auto d = surface_distances(p, g);
    if (d.sp.empty() || d.sg.empty())
        throw DegenerateCase("adb: undefined for an empty mask");
    double mp = 0.0, mg = 0.0;
    for (double q : d.p_to_g) mp += std::sqrt(q);
    for (double q : d.g_to_p) mg += std::sqrt(q);
    return 0.5 * (mp / double(d.p_to_g.size()) + mg / double(d.g_to_p.size()));
}

double hd95(const Mask3D& p, const Mask3D& g) {
    check_aligned(p, g, "hd95");
    const auto d = surface_distances(p, g);
    if (d.sp.empty() || d.sg.empty())
        throw DegenerateCase("hd95: undefined for an empty mask");
    std::vector<double> dp(d.p_to_g.size()), dg(d.g_to_p.size());
    for (size_t i = 0; i < dp.size(); ++i) dp[i] = std::sqrt(d.p_to_g[i]);
    for (size_t i = 0; i < dg.size(); ++i) dg[i] = std::sqrt(d.g_to_p[i]);
    return std::max(percentile_linear(std::move(dp), 95.0),
                    percentile_linear(std::move(dg), 95.0));
}

double percentile_linear(std::vector<double> values, double pct) {
    if (values.empty()) throw EmptyInput("percentile of empty set");
    std::sort(values.begin(), values.end());
    const double h = pct / 100.0 * double(values.size() - 1);
    const size_t lo = size_t(h);
    if (lo + 1 >= values.size()) return values.back();
    const double frac = h - double(lo);
    return values[lo] + frac * (values[lo + 1] - values[lo]);
}

std::string MetricsReport::flags() const {
    if (both_empty) return "both_empty";
    if (distances_degenerate) return "degenerate_distances";
    return "";
}

MetricsReport evaluate_case(const Mask3D& p, const Mask3D& g, double tau_mm) {
    check_aligned(p, g, "evaluate_case");
    MetricsReport r;
    std::tie(r.dice, r.jaccard) = dice_jaccard(p, g);
    const bool pe = p.empty_mask(), ge = g.empty_mask();
    if (pe && ge) {
        r.both_empty = true;
        r.nsd = 1.0;
        r.adb_mm = 0.0;
        r.hd95_mm = 0.0;
        return r;
    }
    r.nsd = nsd(p, g, tau_mm);
    if (pe || ge) {
        r.distances_degenerate = true;
        r.adb_mm = std::numeric_limits<double>::quiet_NaN();
        r.hd95_mm = std::numeric_limits<double>::quiet_NaN();
        return r;
    }
    r.adb_mm = adb(p, g);
    r.hd95_mm = hd95(p, g);
    return r;
}

namespace {

Aggregate::Stat stat_of(const std::vector<double>& xs, size_t excluded) {
    Aggregate::Stat s;
    s.count = xs.size();
    s.excluded = excluded;
    if (xs.empty()) return s;
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= double(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= double(xs.size());
    s.mean = mean;
    s.variance = var;
    return s;
}

}  // namespace

Aggregate aggregate(const std::vector<MetricsReport>& reports) {
    if (reports.empty()) throw EmptyInput("aggregate: no reports");
    std::vector<double> dice, jac, nsd_v, adb_v, hd_v;
    size_t excluded = 0;
    for (const auto& r : reports) {
        dice.push_back(r.dice);
        jac.push_back(r.jaccard);
        nsd_v.push_back(r.nsd);
        if (r.distances_degenerate) {
            ++excluded;
        } else {
            adb_v.push_back(r.adb_mm);
            hd_v.push_back(r.hd95_mm);
        }
    }
    Aggregate a;
    a.dice = stat_of(dice, 0);
    a.jaccard = stat_of(jac, 0);
    a.nsd = stat_of(nsd_v, 0);
    a.adb_mm = stat_of(adb_v, excluded);
    a.hd95_mm = stat_of(hd_v, excluded);
    return a;
}

}  // namespace ctseg::metrics
