#include "lfusion/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "lfusion/common.hpp"

namespace lfusion {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::vector<double> gaussian_kernel(double sigma) {
    int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * radius + 1);
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * (i / sigma) * (i / sigma));
        total += k[i + radius];
    }
    for (double& v : k) v /= total;
    return k;
}

// Separable Gaussian blur with clamp-to-edge borders, in place.
void blur_plane(std::vector<double>& img, std::size_t h, std::size_t w, double sigma) {
    std::vector<double> k = gaussian_kernel(sigma);
    int radius = static_cast<int>(k.size() / 2);
    std::vector<double> tmp(img.size());
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                long xx = std::clamp<long>(static_cast<long>(x) + i, 0,
                                           static_cast<long>(w) - 1);
                acc += k[i + radius] * img[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                long yy = std::clamp<long>(static_cast<long>(y) + i, 0,
                                           static_cast<long>(h) - 1);
                acc += k[i + radius] * tmp[yy * w + x];
            }
            img[y * w + x] = acc;
        }
}

// Gaussian-smoothed standard normal field, rescaled back to unit variance so
// the caller's amplitude parameter is in pixels regardless of the smoothing.
std::vector<double> smoothed_unit_noise(RngStream& rng, std::size_t h, std::size_t w,
                                        double sigma) {
    std::vector<double> field(h * w);
    for (double& v : field) v = rng_normal(rng);
    blur_plane(field, h, w, sigma);
    double mean = 0.0;
    for (double v : field) mean += v;
    mean /= static_cast<double>(field.size());
    double var = 0.0;
    for (double v : field) var += (v - mean) * (v - mean);
    var /= static_cast<double>(field.size());
    double scale = var > 1e-24 ? 1.0 / std::sqrt(var) : 0.0;
    for (double& v : field) v = (v - mean) * scale;
    return field;
}

void apply_speckle(float* plane, std::size_t h, std::size_t w, RngStream& rng,
                   double strength, double sigma) {
    std::vector<double> noise = smoothed_unit_noise(rng, h, w, sigma);
    for (std::size_t i = 0; i < h * w; ++i) {
        double v = plane[i] * (1.0 + strength * noise[i]);
        plane[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
}

void blur_image(float* plane, std::size_t h, std::size_t w, double sigma) {
    std::vector<double> buf(h * w);
    for (std::size_t i = 0; i < h * w; ++i) buf[i] = plane[i];
    blur_plane(buf, h, w, sigma);
    for (std::size_t i = 0; i < h * w; ++i) plane[i] = static_cast<float>(buf[i]);
}

double bilinear(const float* plane, std::size_t h, std::size_t w, double y, double x) {
    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
    std::size_t y0 = static_cast<std::size_t>(y);
    std::size_t x0 = static_cast<std::size_t>(x);
    std::size_t y1 = std::min(y0 + 1, h - 1);
    std::size_t x1 = std::min(x0 + 1, w - 1);
    double fy = y - static_cast<double>(y0);
    double fx = x - static_cast<double>(x0);
    double top = (1.0 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1];
    double bot = (1.0 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1];
    return (1.0 - fy) * top + fy * bot;
}

float nearest(const float* plane, std::size_t h, std::size_t w, double y, double x) {
    long yy = std::clamp<long>(std::lround(y), 0, static_cast<long>(h) - 1);
    long xx = std::clamp<long>(std::lround(x), 0, static_cast<long>(w) - 1);
    return plane[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
}

double uniform_in(RngStream& rng, double lo, double hi) {
    return lo + rng_uniform(rng) * (hi - lo);
}

struct PlaneShape {
    std::size_t frames = 1;
    std::size_t h = 0;
    std::size_t w = 0;
};

PlaneShape record_planes(const SampleRecord& rec) {
    const Tensor& img = rec.image;
    if (img.ndim() == 3 && img.extent(0) == 1)
        return {1, img.extent(1), img.extent(2)};
    if (img.ndim() == 4 && img.extent(0) == 1)
        return {img.extent(1), img.extent(2), img.extent(3)};
    throw DataError("sample image must be (1, H, W) or (1, T, H, W)");
}

std::uint64_t file_checksum(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    return fnv1a64(bytes.data(), bytes.size());
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) out.push_back(field);
    return out;
}

}  // namespace

std::string kind_name(PhantomKind k) {
    return k == PhantomKind::Head ? "head" : "heart";
}

PhantomKind parse_kind(const std::string& name) {
    if (name == "head") return PhantomKind::Head;
    if (name == "heart") return PhantomKind::Heart;
    throw ConfigError("unknown phantom kind: " + name);
}

std::size_t kind_class_count(PhantomKind k) {
    return k == PhantomKind::Head ? 2 : 7;
}

Tensor ellipse_mask(std::size_t size, double cy, double cx, double a, double b,
                    double theta) {
    Tensor mask({size, size}, 0.0f);
    double ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            double dy = static_cast<double>(y) - cy;
            double dx = static_cast<double>(x) - cx;
            double u = dx * ct + dy * st;
            double v = -dx * st + dy * ct;
            if ((u / a) * (u / a) + (v / b) * (v / b) <= 1.0)
                mask[y * size + x] = 1.0f;
        }
    return mask;
}

SampleRecord gen_head_phantom(std::uint64_t seed, std::size_t size) {
    if (size < 64) throw ConfigError("phantom size must be at least 64");
    RngStream shape = derive_stream(seed, "head-shape");
    double s = static_cast<double>(size);
    double cy = (s - 1.0) / 2.0 + uniform_in(shape, -0.10, 0.10) * s;
    double cx = (s - 1.0) / 2.0 + uniform_in(shape, -0.10, 0.10) * s;
    // axis lengths 25-40% of the image side
    double a = uniform_in(shape, 0.125, 0.20) * s;
    double b = uniform_in(shape, 0.125, 0.20) * s;
    double theta = uniform_in(shape, 0.0, kPi);

    SampleRecord rec;
    rec.kind = PhantomKind::Head;
    rec.seed = seed;
    rec.spacing = 0.2;
    rec.mask = ellipse_mask(size, cy, cx, a, b, theta);

    double rim = std::max(2.0, s / 85.0);
    Tensor outer = ellipse_mask(size, cy, cx, a + rim, b + rim, theta);
    Tensor inner = ellipse_mask(size, cy, cx, std::max(a - rim, 1.0),
                                std::max(b - rim, 1.0), theta);
    rec.image = Tensor({1, size, size}, 0.0f);
    for (std::size_t i = 0; i < size * size; ++i) {
        float v = 0.15f;                    // background
        if (inner[i] > 0.5f) v = 0.35f;     // darker interior
        else if (outer[i] > 0.5f) v = 0.9f; // bright skull rim
        rec.image[i] = v;
    }
    RngStream sp = derive_stream(seed, "head-speckle");
    apply_speckle(rec.image.data(), size, size, sp, 0.3, 1.5);
    blur_image(rec.image.data(), size, size, 1.0);
    return rec;
}

SampleRecord gen_heart_phantom(std::uint64_t seed, std::size_t size) {
    if (size < 64) throw ConfigError("phantom size must be at least 64");
    RngStream shape = derive_stream(seed, "heart-shape");
    double s = static_cast<double>(size);
    double tcy = (s - 1.0) / 2.0 + uniform_in(shape, -0.03, 0.03) * s;
    double tcx = (s - 1.0) / 2.0 + uniform_in(shape, -0.03, 0.03) * s;
    double rt = uniform_in(shape, 0.33, 0.38) * s;
    double hcy = tcy + uniform_in(shape, -0.04, 0.04) * s;
    double hcx = tcx + uniform_in(shape, -0.04, 0.04) * s;
    double ha = uniform_in(shape, 0.16, 0.20) * s;
    double hb = uniform_in(shape, 0.13, 0.17) * s;
    double theta = uniform_in(shape, 0.0, kPi);
    double ct = std::cos(theta), st = std::sin(theta);

    SampleRecord rec;
    rec.kind = PhantomKind::Heart;
    rec.seed = seed;
    rec.spacing = 0.15;
    rec.mask = Tensor({size, size}, 0.0f);
    rec.image = Tensor({1, size, size}, 0.0f);

    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            std::size_t at = y * size + x;
            double dty = static_cast<double>(y) - tcy;
            double dtx = static_cast<double>(x) - tcx;
            double rdist = std::sqrt(dty * dty + dtx * dtx);
            float label = 0.0f;
            float shade = 0.12f;
            if (rdist <= rt) {
                label = 1.0f;  // thorax
                shade = rdist >= rt - 2.5 ? 0.8f : 0.35f;
                double dy = static_cast<double>(y) - hcy;
                double dx = static_cast<double>(x) - hcx;
                double u = dx * ct + dy * st;
                double v = -dx * st + dy * ct;
                double e = (u / ha) * (u / ha) + (v / hb) * (v / hb);
                if (e <= 1.0) {
                    label = 2.0f;  // heart wall / septum
                    shade = e >= 0.88 ? 0.85f : 0.6f;
                    double ei = (u / (0.82 * ha)) * (u / (0.82 * ha)) +
                                (v / (0.82 * hb)) * (v / (0.82 * hb));
                    bool off_septum =
                        std::fabs(u) / ha >= 0.07 && std::fabs(v) / hb >= 0.07;
                    if (ei <= 1.0 && off_septum) {
                        label = static_cast<float>(3 + 2 * (u > 0.0) + (v > 0.0));
                        shade = 0.22f;  // blood pool
                    }
                }
            }
            rec.mask[at] = label;
            rec.image[at] = shade;
        }
    RngStream sp = derive_stream(seed, "heart-speckle");
    apply_speckle(rec.image.data(), size, size, sp, 0.3, 1.5);
    blur_image(rec.image.data(), size, size, 1.0);
    return rec;
}

SampleRecord elastic_deform(const SampleRecord& rec, double alpha, double sigma,
                            std::uint64_t seed) {
    if (alpha < 0.0) throw ConfigError("elastic_deform: alpha must be nonnegative");
    if (!(sigma > 0.0)) throw ConfigError("elastic_deform: sigma must be positive");
    PlaneShape ps = record_planes(rec);
    if (rec.mask.numel() != ps.frames * ps.h * ps.w)
        throw DataError("elastic_deform: mask does not match the image extent");

    // Displacement = rotated gradient of a Gaussian-smoothed noise potential,
    // normalized to unit per-component variance and scaled by alpha. The
    // divergence-free construction keeps the warp volume-preserving to first
    // order, so total image mass stays stable under strong deformation.
    RngStream rng = derive_stream(seed, "elastic");
    std::size_t h = ps.h, w = ps.w;
    std::vector<double> psi(h * w);
    for (double& v : psi) v = rng_normal(rng);
    blur_plane(psi, h, w, sigma);
    std::vector<double> dy(h * w), dx(h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            std::size_t xm = x == 0 ? 0 : x - 1, xp = x == w - 1 ? w - 1 : x + 1;
            std::size_t ym = y == 0 ? 0 : y - 1, yp = y == h - 1 ? h - 1 : y + 1;
            dx[y * w + x] = (psi[yp * w + x] - psi[ym * w + x]) / 2.0;
            dy[y * w + x] = -(psi[y * w + xp] - psi[y * w + xm]) / 2.0;
        }
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < h * w; ++i) mean += dy[i] + dx[i];
    mean /= 2.0 * static_cast<double>(h * w);
    for (std::size_t i = 0; i < h * w; ++i)
        var += (dy[i] - mean) * (dy[i] - mean) + (dx[i] - mean) * (dx[i] - mean);
    var /= 2.0 * static_cast<double>(h * w);
    double scale = var > 1e-24 ? alpha / std::sqrt(var) : 0.0;
    for (std::size_t i = 0; i < h * w; ++i) {
        dy[i] = (dy[i] - mean) * scale;
        dx[i] = (dx[i] - mean) * scale;
    }

    SampleRecord out = rec;
    out.is_ood = true;
    out.image = Tensor(rec.image.shape(), 0.0f);
    out.mask = Tensor(rec.mask.shape(), 0.0f);
    for (std::size_t t = 0; t < ps.frames; ++t) {
        const float* src_img = rec.image.data() + t * ps.h * ps.w;
        const float* src_msk = rec.mask.data() + t * ps.h * ps.w;
        float* dst_img = out.image.data() + t * ps.h * ps.w;
        float* dst_msk = out.mask.data() + t * ps.h * ps.w;
        for (std::size_t y = 0; y < ps.h; ++y)
            for (std::size_t x = 0; x < ps.w; ++x) {
                std::size_t at = y * ps.w + x;
                double sy = static_cast<double>(y) + dy[at];
                double sx = static_cast<double>(x) + dx[at];
                dst_img[at] = static_cast<float>(bilinear(src_img, ps.h, ps.w, sy, sx));
                dst_msk[at] = nearest(src_msk, ps.h, ps.w, sy, sx);
            }
    }
    return out;
}

SampleRecord gen_clip(const SampleRecord& rec, int frames, const MotionConfig& cfg,
                      std::uint64_t seed) {
    if (frames < 2) throw ConfigError("gen_clip: need at least two frames");
    PlaneShape ps = record_planes(rec);
    if (ps.frames != 1) throw DataError("gen_clip: source record is already a clip");

    RngStream motion = derive_stream(seed, "motion");
    double rot = uniform_in(motion, -cfg.max_rot_deg, cfg.max_rot_deg) * kPi / 180.0;
    double ty = uniform_in(motion, -cfg.max_translate_frac, cfg.max_translate_frac) *
                static_cast<double>(ps.h);
    double tx = uniform_in(motion, -cfg.max_translate_frac, cfg.max_translate_frac) *
                static_cast<double>(ps.w);
    double sc = uniform_in(motion, cfg.min_scale, cfg.max_scale);

    std::size_t T = static_cast<std::size_t>(frames);
    SampleRecord out = rec;
    out.image = Tensor({1, T, ps.h, ps.w}, 0.0f);
    out.mask = Tensor({T, ps.h, ps.w}, 0.0f);
    double cy = (static_cast<double>(ps.h) - 1.0) / 2.0;
    double cx = (static_cast<double>(ps.w) - 1.0) / 2.0;

    for (std::size_t t = 0; t < T; ++t) {
        double tau = static_cast<double>(t) / static_cast<double>(T - 1);
        double sstep = tau * tau * (3.0 - 2.0 * tau);
        double ang = sstep * rot;
        double scale = 1.0 + sstep * (sc - 1.0);
        double oy = sstep * ty, ox = sstep * tx;
        double ca = std::cos(ang), sa = std::sin(ang);
        float* dst_img = out.image.data() + t * ps.h * ps.w;
        float* dst_msk = out.mask.data() + t * ps.h * ps.w;
        for (std::size_t y = 0; y < ps.h; ++y)
            for (std::size_t x = 0; x < ps.w; ++x) {
                // invert dst = R S (src - c) + c + o
                double wy = (static_cast<double>(y) - cy - oy) / scale;
                double wx = (static_cast<double>(x) - cx - ox) / scale;
                double sy = ca * wy + sa * wx + cy;
                double sx = -sa * wy + ca * wx + cx;
                dst_img[y * ps.w + x] =
                    static_cast<float>(bilinear(rec.image.data(), ps.h, ps.w, sy, sx));
                dst_msk[y * ps.w + x] = nearest(rec.mask.data(), ps.h, ps.w, sy, sx);
            }
        RngStream sp = derive_stream(seed, "clip-speckle", t);
        apply_speckle(dst_img, ps.h, ps.w, sp, 0.3, 1.5);
    }
    return out;
}

SampleRecord augment(const SampleRecord& rec, const AugmentConfig& cfg,
                     std::uint64_t seed) {
    if (!(cfg.crop_min >= 0.8 && cfg.crop_min <= 1.0))
        throw ConfigError("augment: crop area fraction must stay within [0.8, 1]");
    if (!(cfg.intensity_lo > 0.0 && cfg.intensity_lo <= cfg.intensity_hi))
        throw ConfigError("augment: invalid intensity range");
    if (cfg.max_rot_deg < 0.0) throw ConfigError("augment: invalid rotation bound");
    PlaneShape ps = record_planes(rec);
    if (ps.frames != 1) throw DataError("augment: expected a single-frame record");

    RngStream rng = derive_stream(seed, "augment");
    bool do_flip = rng_uniform(rng) < 0.5 && cfg.flip;
    double ang = uniform_in(rng, -cfg.max_rot_deg, cfg.max_rot_deg) * kPi / 180.0;
    double inten = uniform_in(rng, cfg.intensity_lo, cfg.intensity_hi);
    double frac = uniform_in(rng, cfg.crop_min, 1.0);
    double offy = rng_uniform(rng);
    double offx = rng_uniform(rng);

    std::size_t h = ps.h, w = ps.w;
    Tensor img = rec.image.reshaped({h, w});
    Tensor msk = rec.mask;

    if (do_flip) {
        Tensor fi({h, w}, 0.0f), fm({h, w}, 0.0f);
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                fi[y * w + x] = img[y * w + (w - 1 - x)];
                fm[y * w + x] = msk[y * w + (w - 1 - x)];
            }
        img = fi;
        msk = fm;
    }

    double cy = (static_cast<double>(h) - 1.0) / 2.0;
    double cx = (static_cast<double>(w) - 1.0) / 2.0;
    double ca = std::cos(ang), sa = std::sin(ang);
    Tensor ri({h, w}, 0.0f), rm({h, w}, 0.0f);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double wy = static_cast<double>(y) - cy;
            double wx = static_cast<double>(x) - cx;
            double sy = ca * wy + sa * wx + cy;
            double sx = -sa * wy + ca * wx + cx;
            ri[y * w + x] = static_cast<float>(bilinear(img.data(), h, w, sy, sx));
            rm[y * w + x] = nearest(msk.data(), h, w, sy, sx);
        }

    for (std::size_t i = 0; i < h * w; ++i)
        ri[i] = static_cast<float>(std::clamp(ri[i] * inten, 0.0, 1.0));

    double side_frac = std::sqrt(frac);
    std::size_t sh = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(side_frac * static_cast<double>(h))), 1, h);
    std::size_t sw = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(side_frac * static_cast<double>(w))), 1, w);
    std::size_t y0 = static_cast<std::size_t>(
        std::lround(offy * static_cast<double>(h - sh)));
    std::size_t x0 = static_cast<std::size_t>(
        std::lround(offx * static_cast<double>(w - sw)));

    SampleRecord out = rec;
    out.image = Tensor({1, h, w}, 0.0f);
    out.mask = Tensor({h, w}, 0.0f);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double sy = static_cast<double>(y0) +
                        (static_cast<double>(y) + 0.5) * static_cast<double>(sh) /
                            static_cast<double>(h) -
                        0.5;
            double sx = static_cast<double>(x0) +
                        (static_cast<double>(x) + 0.5) * static_cast<double>(sw) /
                            static_cast<double>(w) -
                        0.5;
            out.image[y * w + x] = static_cast<float>(bilinear(ri.data(), h, w, sy, sx));
            out.mask[y * w + x] = nearest(rm.data(), h, w, sy, sx);
        }
    return out;
}

void dataset_write(const std::vector<SampleRecord>& records, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::string manifest_path = (fs::path(dir) / "manifest.csv").string();
    std::FILE* mf = std::fopen(manifest_path.c_str(), "wb");
    if (!mf) throw DataError("cannot open " + manifest_path + " for writing");
    std::fprintf(mf, "sample_id,kind,is_ood,spacing,seed,image_file,mask_file\n");
    std::vector<std::string> files;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const SampleRecord& r = records[i];
        char id[16];
        std::snprintf(id, sizeof(id), "s%04zu", i);
        std::string img_name = std::string(id) + "_image.lft";
        std::string msk_name = std::string(id) + "_mask.lft";
        tensor_write(r.image, (fs::path(dir) / img_name).string());
        tensor_write(r.mask, (fs::path(dir) / msk_name).string());
        std::fprintf(mf, "%s,%s,%d,%.17g,%llu,%s,%s\n", id, kind_name(r.kind).c_str(),
                     r.is_ood ? 1 : 0, r.spacing,
                     static_cast<unsigned long long>(r.seed), img_name.c_str(),
                     msk_name.c_str());
        files.push_back(img_name);
        files.push_back(msk_name);
    }
    std::fclose(mf);

    std::string sums_path = (fs::path(dir) / "checksums.txt").string();
    std::FILE* cf = std::fopen(sums_path.c_str(), "wb");
    if (!cf) throw DataError("cannot open " + sums_path + " for writing");
    std::fprintf(cf, "%016llx manifest.csv\n",
                 static_cast<unsigned long long>(file_checksum(manifest_path)));
    for (const std::string& name : files)
        std::fprintf(cf, "%016llx %s\n",
                     static_cast<unsigned long long>(
                         file_checksum(fs::path(dir) / name)),
                     name.c_str());
    std::fclose(cf);
}

std::vector<SampleRecord> dataset_read(const std::string& dir) {
    namespace fs = std::filesystem;
    fs::path root(dir);
    if (!fs::exists(root / "manifest.csv"))
        throw DataError("missing manifest.csv in " + dir);
    std::ifstream sums(root / "checksums.txt");
    if (!sums) throw DataError("missing checksums.txt in " + dir);
    std::string line;
    while (std::getline(sums, line)) {
        if (line.empty()) continue;
        std::size_t space = line.find(' ');
        if (space == std::string::npos || space != 16)
            throw DataError("malformed checksum line: " + line);
        std::uint64_t want = std::stoull(line.substr(0, 16), nullptr, 16);
        std::string name = line.substr(17);
        if (file_checksum(root / name) != want)
            throw DataError("checksum mismatch for " + name);
    }

    std::ifstream mf(root / "manifest.csv");
    if (!mf) throw DataError("cannot open manifest.csv in " + dir);
    if (!std::getline(mf, line) ||
        line != "sample_id,kind,is_ood,spacing,seed,image_file,mask_file")
        throw DataError("malformed manifest header in " + dir);
    std::vector<SampleRecord> records;
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f = split_csv(line);
        if (f.size() != 7) throw DataError("malformed manifest row: " + line);
        SampleRecord r;
        if (f[1] == "head") r.kind = PhantomKind::Head;
        else if (f[1] == "heart") r.kind = PhantomKind::Heart;
        else throw DataError("unknown phantom kind in manifest: " + f[1]);
        r.is_ood = f[2] == "1";
        r.spacing = std::strtod(f[3].c_str(), nullptr);
        r.seed = std::strtoull(f[4].c_str(), nullptr, 10);
        r.image = tensor_read((root / f[5]).string());
        r.mask = tensor_read((root / f[6]).string());
        records.push_back(std::move(r));
    }
    return records;
}

}  // namespace lfusion
