#pragma once

#include <map>
#include <string>
#include <vector>

#include "lfusion/tensor.hpp"

namespace lfusion {

// Overlap metrics for binary H x W masks (values exactly 0 or 1).
// Both masks empty counts as perfect agreement (1.0); one empty gives 0.0.
double dice(const Tensor& pred, const Tensor& truth);
double iou(const Tensor& pred, const Tensor& truth);

// Exact symmetric Hausdorff distance between 4-connectivity boundary pixel
// sets, Euclidean pixel distance scaled by `spacing_mm`. `percentile` = 100
// gives the exact maximum; smaller values give the percentile variant.
// Throws DataError when either mask is empty.
double hausdorff(const Tensor& pred, const Tensor& truth, double spacing_mm = 1.0,
                 double percentile = 100.0);

// Iso-0.5 marching-squares contour length of a mask, in mm.
double contour_length(const Tensor& mask, double spacing_mm = 1.0);
double abs_diff(const Tensor& pred, const Tensor& truth, double spacing_mm = 1.0);

// Mann-Whitney AUROC: P(score_pos > score_neg) + 0.5 P(tie), via average
// ranks in O(n log n). Requires both classes present.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

struct SegScores {
    std::string sample_id;
    int cls = 0;
    double dice = 0.0;
    double iou = 0.0;
    double hd_mm = 0.0;
    double ad_mm = 0.0;
};

struct SummaryStats {
    double mean = 0.0;
    double stddev = 0.0;  // population
    double p25 = 0.0;
    double p75 = 0.0;
};

SummaryStats summarize(std::vector<double> values);

// CSV: sample_id,class,dice,iou,hd_mm,ad_mm
void write_metric_report_csv(const std::string& path, const std::vector<SegScores>& rows);
// JSON: {"metric": {"mean":..,"std":..,"p25":..,"p75":..}, ...}
void write_summary_json(const std::string& path,
                        const std::map<std::string, SummaryStats>& stats);

// 4-connectivity boundary pixels of a binary mask, as (row, col) pairs.
std::vector<std::pair<int, int>> boundary_pixels(const Tensor& mask);

}  // namespace lfusion
