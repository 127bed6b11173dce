#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lfusion/rng.hpp"
#include "lfusion/tensor.hpp"

namespace lfusion {

// Synthetic ultrasound-like phantoms: speckled head/heart images with masks,
// elastic OOD variants, affine sweep clips, training augmentations, and the
// on-disk dataset layout. Every generator is a pure function of its seed and
// configuration.

enum class PhantomKind { Head, Heart };

std::string kind_name(PhantomKind k);
PhantomKind parse_kind(const std::string& name);

// Class labels: head phantoms use {0 background, 1 skull}; heart phantoms use
// {0 background, 1 thorax, 2 heart, 3..6 chambers}.
std::size_t kind_class_count(PhantomKind k);

struct SampleRecord {
    Tensor image;  // (1, H, W) or (1, T, H, W), intensities in [0, 1]
    Tensor mask;   // (H, W) or (T, H, W), class indices stored as floats
    bool is_ood = false;
    double spacing = 0.2;  // mm per pixel
    std::uint64_t seed = 0;
    PhantomKind kind = PhantomKind::Head;
};

// Filled rotated ellipse sampled at pixel centers; 1 inside, 0 outside.
// a and b are the semi-axes in pixels, theta the rotation in radians.
Tensor ellipse_mask(std::size_t size, double cy, double cx, double a, double b,
                    double theta);

SampleRecord gen_head_phantom(std::uint64_t seed, std::size_t size = 256);
SampleRecord gen_heart_phantom(std::uint64_t seed, std::size_t size = 256);

// Warp by a smoothed random displacement field: unit-normal noise is
// Gaussian-blurred (std sigma pixels) into a potential whose rotated gradient,
// normalized to unit variance and scaled by alpha pixels, displaces every
// pixel. The same field moves the image (bilinear) and the mask (nearest);
// the result is flagged OOD.
SampleRecord elastic_deform(const SampleRecord& rec, double alpha, double sigma,
                            std::uint64_t seed);

struct MotionConfig {
    double max_rot_deg = 10.0;
    double max_translate_frac = 0.05;
    double min_scale = 0.95;
    double max_scale = 1.05;
};

// Sweep clip: frame t applies the affine interpolated from identity (frame 0)
// to a random in-range target along a smoothstep curve, with fresh speckle
// per frame. Image becomes (1, T, H, W), mask (T, H, W).
SampleRecord gen_clip(const SampleRecord& rec, int frames, const MotionConfig& cfg,
                      std::uint64_t seed);

struct AugmentConfig {
    bool flip = true;
    double max_rot_deg = 15.0;
    double intensity_lo = 0.9;
    double intensity_hi = 1.1;
    double crop_min = 0.8;  // minimum crop area fraction; must stay >= 0.8

    static AugmentConfig identity() {
        return AugmentConfig{false, 0.0, 1.0, 1.0, 1.0};
    }
};

// Linear augmentation: optional horizontal flip, rotation, intensity scale,
// then a random crop of at least crop_min of the area resized back to the
// input size. Image and mask receive the same geometric transform.
SampleRecord augment(const SampleRecord& rec, const AugmentConfig& cfg,
                     std::uint64_t seed);

// Directory layout: manifest.csv, per-sample LFT1 tensors, checksums.txt with
// one FNV-1a 64 line per file. Round trips are bit-exact.
void dataset_write(const std::vector<SampleRecord>& records, const std::string& dir);
std::vector<SampleRecord> dataset_read(const std::string& dir);

}  // namespace lfusion
