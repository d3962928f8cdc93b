#include "ctseg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace ctseg::vol {

namespace {

void check_dims(const Shape3& dims) {
    if (dims.d <= 0 || dims.h <= 0 || dims.w <= 0)
        throw ShapeError("volume dims must be positive, got " + to_string(dims));
}

void check_spacing(const Spacing3& s) {
    if (!(s.z > 0.0) || !(s.y > 0.0) || !(s.x > 0.0))
        throw ShapeError("voxel spacing must be positive");
}

}  // namespace

std::string to_string(const Shape3& s) {
    return "(" + std::to_string(s.d) + "," + std::to_string(s.h) + "," + std::to_string(s.w) + ")";
}

Volume3D::Volume3D(Shape3 dims, Spacing3 spacing, std::vector<float> voxels)
    : dims_(dims), spacing_(spacing), voxels_(std::move(voxels)) {
    check_dims(dims_);
    check_spacing(spacing_);
    if (voxels_.size() != dims_.numel())
        throw ShapeError("voxel count " + std::to_string(voxels_.size()) + " does not match dims " +
                         to_string(dims_));
}

Mask3D::Mask3D(Shape3 dims, Spacing3 spacing, std::vector<uint8_t> labels)
    : dims_(dims), spacing_(spacing), labels_(std::move(labels)) {
    check_dims(dims_);
    check_spacing(spacing_);
    if (labels_.size() != dims_.numel())
        throw ShapeError("label count does not match dims " + to_string(dims_));
    for (uint8_t v : labels_)
        if (v > 1) throw ShapeError("mask labels must be 0 or 1");
}

size_t Mask3D::foreground_count() const {
    size_t n = 0;
    for (uint8_t v : labels_) n += v;
    return n;
}

// --- .vol3 and NIfTI ------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'V', 'O', 'L', '3'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_raw(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is, const char* what) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw MalformedFile(std::string("truncated file while reading ") + what);
    return v;
}

struct Vol3Header {
    uint8_t kind = 0;
    Shape3 dims;
    Spacing3 spacing;
};

Vol3Header read_vol3_header(std::istream& is, const std::filesystem::path& path) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw MalformedFile(path.string() + ": bad magic, not a .vol3 file");
    const auto version = read_raw<uint32_t>(is, "version");
    if (version != kVersion)
        throw UnsupportedFormat(path.string() + ": unsupported .vol3 version " +
                                std::to_string(version));
    Vol3Header h;
    h.kind = read_raw<uint8_t>(is, "kind");
    if (h.kind > 1) throw MalformedFile(path.string() + ": unknown payload kind");
    h.dims.d = int(read_raw<uint32_t>(is, "dims"));
    h.dims.h = int(read_raw<uint32_t>(is, "dims"));
    h.dims.w = int(read_raw<uint32_t>(is, "dims"));
    h.spacing.z = read_raw<double>(is, "spacing");
    h.spacing.y = read_raw<double>(is, "spacing");
    h.spacing.x = read_raw<double>(is, "spacing");
    if (h.dims.d <= 0 || h.dims.h <= 0 || h.dims.w <= 0)
        throw MalformedFile(path.string() + ": non-positive dims");
    return h;
}

bool has_extension(const std::filesystem::path& p, const char* ext) {
    auto e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
    return e == ext;
}

// Minimal NIfTI-1 ingestion: dims, pixdim, scl_slope/scl_inter, common
// datatypes. Everything else in the header is ignored.
Volume3D load_nifti(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IOFailure("cannot open " + path.string());

    char hdr[348];
    is.read(hdr, sizeof(hdr));
    if (!is) throw MalformedFile(path.string() + ": NIfTI header truncated");

    auto rd_i32 = [&](size_t off) {
        int32_t v;
        std::memcpy(&v, hdr + off, 4);
        return v;
    };
    auto rd_i16 = [&](size_t off) {
        int16_t v;
        std::memcpy(&v, hdr + off, 2);
        return v;
    };
    auto rd_f32 = [&](size_t off) {
        float v;
        std::memcpy(&v, hdr + off, 4);
        return v;
    };

    if (rd_i32(0) != 348)
        throw UnsupportedFormat(path.string() + ": not a native-endian NIfTI-1 file");
    if (std::memcmp(hdr + 344, "n+1", 3) != 0 && std::memcmp(hdr + 344, "ni1", 3) != 0)
        throw MalformedFile(path.string() + ": NIfTI magic missing");
    if (std::memcmp(hdr + 344, "ni1", 3) == 0)
        throw UnsupportedFormat(path.string() + ": two-file NIfTI (.hdr/.img) not supported");

    const int ndim = rd_i16(40);
    if (ndim < 3) throw MalformedFile(path.string() + ": fewer than 3 dims");
    Shape3 dims;
    dims.w = rd_i16(42);  // nifti dim[1] = x
    dims.h = rd_i16(44);
    dims.d = rd_i16(46);
    for (int i = 4; i <= ndim; ++i)
        if (rd_i16(size_t(40 + 2 * i)) > 1)
            throw UnsupportedFormat(path.string() + ": >3D NIfTI volumes not supported");
    if (dims.d <= 0 || dims.h <= 0 || dims.w <= 0)
        throw MalformedFile(path.string() + ": non-positive NIfTI dims");

    Spacing3 spacing;
    spacing.x = rd_f32(80);  // pixdim[1]
    spacing.y = rd_f32(84);
    spacing.z = rd_f32(88);
    if (!(spacing.x > 0)) spacing.x = 1.0;
    if (!(spacing.y > 0)) spacing.y = 1.0;
    if (!(spacing.z > 0)) spacing.z = 1.0;

    const int16_t datatype = rd_i16(70);
    float slope = rd_f32(112);
    const float inter = rd_f32(116);
    if (slope == 0.0f) slope = 1.0f;
    const auto vox_offset = long(rd_f32(108));

    is.seekg(vox_offset, std::ios::beg);
    const size_t n = dims.numel();
    std::vector<float> out(n);

    auto read_as = [&](auto tag) {
        using S = decltype(tag);
        std::vector<S> buf(n);
        is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(n * sizeof(S)));
        if (!is) throw MalformedFile(path.string() + ": NIfTI payload truncated");
        for (size_t i = 0; i < n; ++i) out[i] = float(buf[i]) * slope + inter;
    };

    switch (datatype) {
        case 2: read_as(uint8_t{}); break;
        case 4: read_as(int16_t{}); break;
        case 8: read_as(int32_t{}); break;
        case 16: read_as(float{}); break;
        case 64: read_as(double{}); break;
        case 512: read_as(uint16_t{}); break;
        default:
            throw UnsupportedFormat(path.string() + ": NIfTI datatype " + std::to_string(datatype) +
                                    " not supported");
    }
    // NIfTI stores x fastest, matching our (D,H,W) row-major layout.
    return Volume3D(dims, spacing, std::move(out));
}

}  // namespace

Volume3D load_volume(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IOFailure("no such file: " + path.string());
    if (has_extension(path, ".nii")) return load_nifti(path);
    if (!has_extension(path, ".vol3"))
        throw UnsupportedFormat(path.string() + ": expected .vol3 or .nii");

    std::ifstream is(path, std::ios::binary);
    if (!is) throw IOFailure("cannot open " + path.string());
    const auto h = read_vol3_header(is, path);
    if (h.kind != 0)
        throw UnsupportedFormat(path.string() + ": mask payload where an intensity volume was expected");
    std::vector<float> voxels(h.dims.numel());
    is.read(reinterpret_cast<char*>(voxels.data()), std::streamsize(voxels.size() * sizeof(float)));
    if (!is) throw MalformedFile(path.string() + ": payload shorter than declared dims");
    char extra;
    if (is.read(&extra, 1)) throw MalformedFile(path.string() + ": trailing bytes after payload");
    return Volume3D(h.dims, h.spacing, std::move(voxels));
}

Mask3D load_mask(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IOFailure("no such file: " + path.string());
    if (has_extension(path, ".nii")) {
        // Accept NIfTI label maps: any nonzero voxel counts as foreground.
        const auto v = load_nifti(path);
        std::vector<uint8_t> labels(v.voxels().size());
        for (size_t i = 0; i < labels.size(); ++i) labels[i] = v.voxels()[i] != 0.0f ? 1 : 0;
        return Mask3D(v.dims(), v.spacing(), std::move(labels));
    }
    if (!has_extension(path, ".vol3"))
        throw UnsupportedFormat(path.string() + ": expected .vol3 or .nii");

    std::ifstream is(path, std::ios::binary);
    if (!is) throw IOFailure("cannot open " + path.string());
    const auto h = read_vol3_header(is, path);
    if (h.kind != 1)
        throw UnsupportedFormat(path.string() + ": intensity payload where a mask was expected");
    std::vector<uint8_t> labels(h.dims.numel());
    is.read(reinterpret_cast<char*>(labels.data()), std::streamsize(labels.size()));
    if (!is) throw MalformedFile(path.string() + ": payload shorter than declared dims");
    char extra;
    if (is.read(&extra, 1)) throw MalformedFile(path.string() + ": trailing bytes after payload");
    return Mask3D(h.dims, h.spacing, std::move(labels));
}

namespace {

void write_vol3_header(std::ostream& os, uint8_t kind, const Shape3& dims, const Spacing3& sp) {
    os.write(kMagic, 4);
    write_raw(os, kVersion);
    write_raw(os, kind);
    write_raw(os, uint32_t(dims.d));
    write_raw(os, uint32_t(dims.h));
    write_raw(os, uint32_t(dims.w));
    write_raw(os, sp.z);
    write_raw(os, sp.y);
    write_raw(os, sp.x);
}

}  // namespace

void save_volume(const Volume3D& v, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IOFailure("cannot write " + path.string());
    write_vol3_header(os, 0, v.dims(), v.spacing());
    os.write(reinterpret_cast<const char*>(v.voxels().data()),
             std::streamsize(v.voxels().size() * sizeof(float)));
    if (!os) throw IOFailure("write failed: " + path.string());
}

void save_mask(const Mask3D& m, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IOFailure("cannot write " + path.string());
    write_vol3_header(os, 1, m.dims(), m.spacing());
    os.write(reinterpret_cast<const char*>(m.labels().data()), std::streamsize(m.labels().size()));
    if (!os) throw IOFailure("write failed: " + path.string());
}

// --- preprocessing ----------------------------------------------------------

Volume3D window_normalize(const Volume3D& v, double lo, double hi) {
    if (!(lo < hi)) throw InvalidWindow("window requires lo < hi");
    const float flo = float(lo);
    const float span = float(hi - lo);
    std::vector<float> out(v.voxels().size());
    for (size_t i = 0; i < out.size(); ++i) {
        float x = (v.voxels()[i] - flo) / span;
        out[i] = std::clamp(x, 0.0f, 1.0f);
    }
    return Volume3D(v.dims(), v.spacing(), std::move(out));
}

namespace {

struct PadOffsets {
    Shape3 out;
    int z0, y0, x0;
};

PadOffsets pad_offsets(const Shape3& in, const Shape3& size) {
    PadOffsets p;
    p.out = {std::max(in.d, size.d), std::max(in.h, size.h), std::max(in.w, size.w)};
    p.z0 = (p.out.d - in.d) / 2;
    p.y0 = (p.out.h - in.h) / 2;
    p.x0 = (p.out.w - in.w) / 2;
    return p;
}

}  // namespace

Volume3D pad_to(const Volume3D& v, const Shape3& size) {
    const auto p = pad_offsets(v.dims(), size);
    if (p.out == v.dims()) return v;
    std::vector<float> out(p.out.numel(), 0.0f);
    for (int z = 0; z < v.dims().d; ++z)
        for (int y = 0; y < v.dims().h; ++y) {
            const float* src = &v.voxels()[(size_t(z) * v.dims().h + y) * v.dims().w];
            float* dst =
                &out[(size_t(z + p.z0) * p.out.h + (y + p.y0)) * p.out.w + p.x0];
            std::copy(src, src + v.dims().w, dst);
        }
    return Volume3D(p.out, v.spacing(), std::move(out));
}

Mask3D pad_to(const Mask3D& m, const Shape3& size) {
    const auto p = pad_offsets(m.dims(), size);
    if (p.out == m.dims()) return m;
    std::vector<uint8_t> out(p.out.numel(), 0);
    for (int z = 0; z < m.dims().d; ++z)
        for (int y = 0; y < m.dims().h; ++y) {
            const uint8_t* src = &m.labels()[(size_t(z) * m.dims().h + y) * m.dims().w];
            uint8_t* dst = &out[(size_t(z + p.z0) * p.out.h + (y + p.y0)) * p.out.w + p.x0];
            std::copy(src, src + m.dims().w, dst);
        }
    return Mask3D(p.out, m.spacing(), std::move(out));
}

namespace {

PatchPair crop(const Volume3D& v, const Mask3D* m, const Shape3& size, int z0, int y0, int x0) {
    std::vector<float> img(size.numel());
    for (int z = 0; z < size.d; ++z)
        for (int y = 0; y < size.h; ++y) {
            const float* src = &v.voxels()[(size_t(z0 + z) * v.dims().h + (y0 + y)) * v.dims().w + x0];
            std::copy(src, src + size.w, &img[(size_t(z) * size.h + y) * size.w]);
        }
    PatchPair p{Volume3D(size, v.spacing(), std::move(img)), std::nullopt, {z0, y0, x0}};
    if (m) {
        std::vector<uint8_t> lab(size.numel());
        for (int z = 0; z < size.d; ++z)
            for (int y = 0; y < size.h; ++y) {
                const uint8_t* src =
                    &m->labels()[(size_t(z0 + z) * m->dims().h + (y0 + y)) * m->dims().w + x0];
                std::copy(src, src + size.w, &lab[(size_t(z) * size.h + y) * size.w]);
            }
        p.mask = Mask3D(size, m->spacing(), std::move(lab));
    }
    return p;
}

bool has_foreground(const Mask3D& m) { return m.foreground_count() > 0; }

}  // namespace

PatchPair sample_patch(const Volume3D& v, const Mask3D* m, const Shape3& size, Rng& rng,
                       double fg_bias) {
    if (m && m->dims() != v.dims())
        throw ShapeError("sample_patch: mask dims " + to_string(m->dims()) +
                         " differ from volume dims " + to_string(v.dims()));

    // Pad first so any volume can host at least one patch.
    Volume3D vp = pad_to(v, size);
    std::optional<Mask3D> mp;
    if (m) mp = pad_to(*m, size);
    const Mask3D* mask = mp ? &*mp : nullptr;

    const Shape3 dims = vp.dims();
    const int zr = dims.d - size.d, yr = dims.h - size.h, xr = dims.w - size.w;

    const bool want_fg =
        mask && has_foreground(*mask) && fg_bias > 0.0 && rng.bernoulli(fg_bias);

    for (int attempt = 0;; ++attempt) {
        const int z0 = zr > 0 ? int(rng.uniform_index(uint64_t(zr) + 1)) : 0;
        const int y0 = yr > 0 ? int(rng.uniform_index(uint64_t(yr) + 1)) : 0;
        const int x0 = xr > 0 ? int(rng.uniform_index(uint64_t(xr) + 1)) : 0;
        PatchPair p = crop(vp, mask, size, z0, y0, x0);
        if (!want_fg || has_foreground(*p.mask) || attempt >= 64) return p;
    }
}

PatchPair augment_flip(const PatchPair& p, Rng& rng) {
    const bool fz = rng.bernoulli(0.5);
    const bool fy = rng.bernoulli(0.5);
    const bool fx = rng.bernoulli(0.5);
    const Shape3 s = p.image.dims();

    auto flip_index = [&](int z, int y, int x) {
        const int zz = fz ? s.d - 1 - z : z;
        const int yy = fy ? s.h - 1 - y : y;
        const int xx = fx ? s.w - 1 - x : x;
        return (size_t(zz) * s.h + yy) * s.w + xx;
    };

    std::vector<float> img(s.numel());
    for (int z = 0; z < s.d; ++z)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x)
                img[(size_t(z) * s.h + y) * s.w + x] = p.image.voxels()[flip_index(z, y, x)];

    PatchPair out{Volume3D(s, p.image.spacing(), std::move(img)), std::nullopt, p.origin};
    if (p.mask) {
        std::vector<uint8_t> lab(s.numel());
        for (int z = 0; z < s.d; ++z)
            for (int y = 0; y < s.h; ++y)
                for (int x = 0; x < s.w; ++x)
                    lab[(size_t(z) * s.h + y) * s.w + x] = p.mask->labels()[flip_index(z, y, x)];
        out.mask = Mask3D(s, p.mask->spacing(), std::move(lab));
    }
    return out;
}

PatchPair augment_noise(const PatchPair& p, double sigma, Rng& rng) {
    if (sigma < 0.0) throw DomainError("augment_noise: sigma must be >= 0");
    if (sigma == 0.0) return p;
    PatchPair out = p;
    for (float& v : out.image.voxels())
        v = std::clamp(v + float(rng.normal(0.0, sigma)), 0.0f, 1.0f);
    return out;
}

MultiScaleTarget downsample_mask(const Mask3D& m) {
    MultiScaleTarget t;
    t.targets.reserve(kNumScales);
    t.targets.push_back(m);
    for (int k = 1; k < kNumScales; ++k) {
        const Mask3D& prev = t.targets.back();
        const Shape3 pd = prev.dims();
        const Shape3 nd{(pd.d + 1) / 2, (pd.h + 1) / 2, (pd.w + 1) / 2};
        std::vector<uint8_t> lab(nd.numel(), 0);
        // 2x2x2 max-pool (window clipped at the border) so thin structures
        // survive to the coarse scales.
        for (int z = 0; z < nd.d; ++z)
            for (int y = 0; y < nd.h; ++y)
                for (int x = 0; x < nd.w; ++x) {
                    uint8_t v = 0;
                    for (int dz = 0; dz < 2 && 2 * z + dz < pd.d; ++dz)
                        for (int dy = 0; dy < 2 && 2 * y + dy < pd.h; ++dy)
                            for (int dx = 0; dx < 2 && 2 * x + dx < pd.w; ++dx)
                                v = std::max(v, prev.at(2 * z + dz, 2 * y + dy, 2 * x + dx));
                    lab[(size_t(z) * nd.h + y) * nd.w + x] = v;
                }
        t.targets.emplace_back(nd, m.spacing(), std::move(lab));
    }
    return t;
}

// --- synthetic data ---------------------------------------------------------

std::pair<Volume3D, Mask3D> make_synthetic_case(Rng& rng, const SyntheticParams& params) {
    const Shape3 dims = params.dims;
    if (dims.d < 16 || dims.h < 16 || dims.w < 16)
        throw DomainError("make_synthetic_case: dims must be at least 16^3");

    std::vector<uint8_t> labels(dims.numel(), 0);
    const int n_blobs = std::max(1, params.n_blobs);
    for (int b = 0; b < n_blobs; ++b) {
        // Ellipsoid center away from the border, semi-axes scaled to volume.
        const double cz = rng.uniform(0.2, 0.8) * dims.d;
        const double cy = rng.uniform(0.2, 0.8) * dims.h;
        const double cx = rng.uniform(0.2, 0.8) * dims.w;
        const double rz = rng.uniform(0.08, 0.22) * dims.d;
        const double ry = rng.uniform(0.08, 0.22) * dims.h;
        const double rx = rng.uniform(0.08, 0.22) * dims.w;
        for (int z = 0; z < dims.d; ++z)
            for (int y = 0; y < dims.h; ++y)
                for (int x = 0; x < dims.w; ++x) {
                    const double ez = (z - cz) / rz, ey = (y - cy) / ry, ex = (x - cx) / rx;
                    if (ez * ez + ey * ey + ex * ex <= 1.0)
                        labels[(size_t(z) * dims.h + y) * dims.w + x] = 1;
                }
    }

    std::vector<float> voxels(dims.numel());
    for (size_t i = 0; i < voxels.size(); ++i)
        voxels[i] = float(labels[i] ? params.foreground : params.background);

    if (params.noise > 0.0) {
        // Low-frequency intensity drift plus white noise, to keep the task
        // from degenerating into a plain threshold.
        const double kz = rng.uniform(0.5, 2.0), ky = rng.uniform(0.5, 2.0),
                     kx = rng.uniform(0.5, 2.0);
        const double ph = rng.uniform(0.0, 6.28);
        size_t i = 0;
        for (int z = 0; z < dims.d; ++z)
            for (int y = 0; y < dims.h; ++y)
                for (int x = 0; x < dims.w; ++x, ++i) {
                    const double drift =
                        0.05 * std::sin(6.28318 * (kz * z / dims.d + ky * y / dims.h +
                                                   kx * x / dims.w) + ph);
                    voxels[i] = std::clamp(
                        float(voxels[i] + drift + rng.normal(0.0, params.noise)), 0.0f, 1.0f);
                }
    }

    Mask3D mask(dims, params.spacing, std::move(labels));
    return {Volume3D(dims, params.spacing, std::move(voxels)), std::move(mask)};
}

}  // namespace ctseg::vol
