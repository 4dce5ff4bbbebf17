#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "anchorseg/model.hpp"
#include "anchorseg/scenegen.hpp"
#include "anchorseg/tensor.hpp"

namespace anchorseg {

struct LossConfig {
    double lambda_cls = 2.0;
    double lambda_bce = 5.0;
    double lambda_dice = 5.0;
    double lambda_geo = 1.0;
    // overlap penalty schedule: geometric ramp lambda_min -> lambda_max over
    // the first 60% of training, then linear decay to lambda_floor
    double lambda_min = 1e-3;
    double lambda_max = 0.5;
    double lambda_floor = 0.05;
    double tau = 0.07;    // contrastive temperature
    double alpha = 0.25;  // focal weighting of the positive class
    double gamma = 2.0;   // focal focusing exponent
    int match_samples = 4096;          // shared pixel subsample for mask terms
    int contrastive_per_instance = 64; // sampled points per instance
    bool disable_overlap = false;      // ablation: weight identically zero
    double fixed_overlap = -1.0;       // ablation: >= 0 replaces the schedule
};

// Minimum-cost assignment, O(n^3). cost is rows x cols row-major; returns
// per-row column index, -1 where a row is unassigned (rows > cols).
std::vector<int> hungarian(const std::vector<double>& cost, int rows, int cols);

// Reference oracle: exhaustive search over permutations (small sizes only).
std::vector<int> brute_force_assignment(const std::vector<double>& cost, int rows, int cols);

double assignment_cost(const std::vector<double>& cost, int rows, int cols,
                       const std::vector<int>& row_to_col);

// Elementwise binary focal term: alpha_t (1 - p_t)^gamma (-log p_t) for
// logits x and hard targets t in {0, 1}.
Tensor focal_elementwise(const Tensor& logits, const Tensor& targets,
                         double alpha, double gamma);

// Binary focal loss on N x 2 class logits with per-row hard labels
// (1 = object). Sum over the two class logits, mean over rows.
Tensor focal_loss(const Tensor& logits, const std::vector<int>& labels,
                  double alpha, double gamma);

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);  // mean

Tensor dice_loss(const Tensor& logits, const Tensor& targets);  // 1-D pair

// Supervised point contrastive loss. z is N x C (unnormalized); labels group
// points into instances. Sum over points that have at least one positive of
// the mean over positives of (logsumexp over non-self pairs - positive sim).
Tensor contrastive_loss(const Tensor& z, const std::vector<int>& labels, double tau);

// Mean pairwise confidence-weighted overlap of soft masks. probs is N x M in
// [0,1], conf is N; returns sum_{i != j} <c_i p_i, c_j p_j> / (N (N-1)).
Tensor overlap_loss(const Tensor& probs, const Tensor& conf);

double overlap_weight(double progress, const LossConfig& cfg);

// Ground-truth instance id per mask-resolution cell (S x H/4 x W/4),
// taken from the representative full-resolution pixel of each 4x4 block.
std::vector<std::uint16_t> gt_cell_ids(const SceneSample& sample);

struct MatchResult {
    std::vector<int> query_to_gt;  // -1 = unmatched (no-object)
    std::vector<std::int64_t> sample_points;  // shared flat cell indices
};

MatchResult match_queries(const LayerOutput& layer, const SceneSample& sample,
                          const std::vector<std::uint16_t>& cell_ids,
                          const LossConfig& cfg, std::uint64_t seed);

struct LossBreakdown {
    Tensor total;
    std::map<std::string, double> terms;  // weighted; sums to total
    std::vector<int> final_match;         // last layer's query -> gt
};

LossBreakdown total_loss(const Model::ForwardResult& result, const SceneSample& sample,
                         const LossConfig& cfg, double progress, std::uint64_t seed);

}  // namespace anchorseg
