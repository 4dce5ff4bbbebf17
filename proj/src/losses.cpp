#include "anchorseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "anchorseg/rng.hpp"

namespace anchorseg {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

std::vector<int> hungarian(const std::vector<double>& cost, int rows, int cols) {
    if (rows <= 0 || cols <= 0) return std::vector<int>(std::max(rows, 0), -1);
    if (static_cast<int>(cost.size()) != rows * cols)
        throw TensorError("hungarian: cost matrix size mismatch");
    int n = std::max(rows, cols);
    // pad to square with zeros; padded cells never beat real ones on ties
    std::vector<double> a(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) a[i * n + j] = cost[i * cols + j];

    // shortest augmenting path with potentials (1-indexed)
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, kInf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            int i0 = p[j0], j1 = -1;
            double delta = kInf;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                double cur = a[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> row_to_col(rows, -1);
    for (int j = 1; j <= n; ++j)
        if (p[j] && p[j] <= rows && j <= cols) row_to_col[p[j] - 1] = j - 1;
    return row_to_col;
}

std::vector<int> brute_force_assignment(const std::vector<double>& cost, int rows, int cols) {
    std::vector<int> best(rows, -1);
    double best_cost = kInf;
    if (rows <= cols) {
        std::vector<int> cperm(cols);
        std::iota(cperm.begin(), cperm.end(), 0);
        do {
            double c = 0;
            for (int i = 0; i < rows; ++i) c += cost[i * cols + cperm[i]];
            if (c < best_cost) {
                best_cost = c;
                for (int i = 0; i < rows; ++i) best[i] = cperm[i];
            }
        } while (std::next_permutation(cperm.begin(), cperm.end()));
    } else {
        std::vector<int> rperm(rows);
        std::iota(rperm.begin(), rperm.end(), 0);
        do {
            double c = 0;
            for (int j = 0; j < cols; ++j) c += cost[rperm[j] * cols + j];
            if (c < best_cost) {
                best_cost = c;
                std::fill(best.begin(), best.end(), -1);
                for (int j = 0; j < cols; ++j) best[rperm[j]] = j;
            }
        } while (std::next_permutation(rperm.begin(), rperm.end()));
    }
    return best;
}

double assignment_cost(const std::vector<double>& cost, int rows, int cols,
                       const std::vector<int>& row_to_col) {
    double c = 0;
    for (int i = 0; i < rows; ++i)
        if (row_to_col[i] >= 0) c += cost[i * cols + row_to_col[i]];
    return c;
}

Tensor focal_elementwise(const Tensor& logits, const Tensor& targets,
                         double alpha, double gamma) {
    // x_t = x (2t - 1), alpha_t = alpha t + (1 - alpha)(1 - t);
    // (1 - p_t) = e^{-softplus(x_t)}, -log p_t = softplus(-x_t)
    auto xt = logits * (targets * 2.0 - 1.0);
    auto at = targets * alpha + (Tensor::scalar(1.0) - targets) * (1.0 - alpha);
    return at * exp(softplus(xt) * (-gamma)) * softplus(neg(xt));
}

Tensor focal_loss(const Tensor& logits, const std::vector<int>& labels,
                  double alpha, double gamma) {
    auto s = logits.shape();
    if (s.size() != 2 || s[1] != 2) throw TensorError("focal_loss: expected N x 2 logits");
    std::int64_t n = s[0];
    if (static_cast<std::int64_t>(labels.size()) != n)
        throw TensorError("focal_loss: label count mismatch");
    std::vector<double> onehot(static_cast<std::size_t>(n) * 2, 0.0);
    for (std::int64_t i = 0; i < n; ++i) onehot[i * 2 + labels[i]] = 1.0;
    auto t = Tensor::from_data({n, 2}, onehot);
    return mean(sum(focal_elementwise(logits, t, alpha, gamma), 1));
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    return mean(softplus(logits) - logits * targets);
}

Tensor dice_loss(const Tensor& logits, const Tensor& targets) {
    auto p = sigmoid(logits);
    auto num = sum(p * targets) * 2.0 + 1.0;
    auto den = sum(p) + sum(targets) + 1.0;
    return Tensor::scalar(1.0) - num / den;
}

Tensor contrastive_loss(const Tensor& z, const std::vector<int>& labels, double tau) {
    auto s = z.shape();
    if (s.size() != 2) throw TensorError("contrastive_loss: expected N x C points");
    std::int64_t n = s[0];
    if (static_cast<std::int64_t>(labels.size()) != n)
        throw TensorError("contrastive_loss: label count mismatch");
    auto nrm = sqrt_(sum(z * z, 1, /*keepdim=*/true) + 1e-12);
    auto zn = z / nrm;
    auto sim = matmul(zn, transpose2d(zn)) * (1.0 / tau);

    std::vector<double> diag(static_cast<std::size_t>(n) * n, 0.0);
    std::vector<double> posw(diag.size(), 0.0);
    std::vector<double> rowsel(static_cast<std::size_t>(n), 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
        diag[i * n + i] = -1e30;
        int cnt = 0;
        for (std::int64_t j = 0; j < n; ++j)
            if (j != i && labels[j] == labels[i]) ++cnt;
        if (!cnt) continue;
        rowsel[i] = 1.0;
        for (std::int64_t j = 0; j < n; ++j)
            if (j != i && labels[j] == labels[i]) posw[i * n + j] = 1.0 / cnt;
    }
    auto masked = sim + Tensor::from_data({n, n}, diag);
    auto mx = max_reduce(masked, 1, /*keepdim=*/true);
    auto lse = log(sum(exp(masked - mx), 1, true)) + mx;  // N x 1
    auto sel = Tensor::from_data({n, 1}, rowsel);
    auto pos_mean = sum(Tensor::from_data({n, n}, posw) * sim, 1, true);
    return sum(sel * (lse - pos_mean));
}

Tensor overlap_loss(const Tensor& probs, const Tensor& conf) {
    auto s = probs.shape();
    if (s.size() != 2) throw TensorError("overlap_loss: expected N x M probabilities");
    std::int64_t n = s[0];
    if (n < 2) return Tensor::scalar(0.0);
    auto weighted = probs * reshape(conf, {n, 1});
    auto gram = matmul(weighted, transpose2d(weighted));
    std::vector<double> offdiag(static_cast<std::size_t>(n) * n, 1.0);
    for (std::int64_t i = 0; i < n; ++i) offdiag[i * n + i] = 0.0;
    auto total = sum(gram * Tensor::from_data({n, n}, offdiag));
    return total * (1.0 / (static_cast<double>(n) * (n - 1)));
}

double overlap_weight(double progress, const LossConfig& cfg) {
    double t = std::clamp(progress, 0.0, 1.0);
    if (cfg.disable_overlap) return 0.0;
    if (cfg.fixed_overlap >= 0.0) return cfg.fixed_overlap;
    if (t <= 0.6) return cfg.lambda_min * std::pow(cfg.lambda_max / cfg.lambda_min, t / 0.6);
    return cfg.lambda_max + (cfg.lambda_floor - cfg.lambda_max) * (t - 0.6) / 0.4;
}

std::vector<std::uint16_t> gt_cell_ids(const SceneSample& sm) {
    int h4 = sm.height / 4, w4 = sm.width / 4;
    std::vector<std::uint16_t> ids(static_cast<std::size_t>(sm.n_views) * h4 * w4);
    std::size_t k = 0;
    for (int s = 0; s < sm.n_views; ++s)
        for (int y = 0; y < h4; ++y)
            for (int x = 0; x < w4; ++x) ids[k++] = sm.id_at(s, 4 * y + 2, 4 * x + 2);
    return ids;
}

namespace {

// cost of assigning each query to each gt instance over the shared subsample
std::vector<double> matching_cost(const LayerOutput& layer,
                                  const std::vector<std::uint16_t>& cell_ids,
                                  const std::vector<std::int64_t>& pts, int n_gt,
                                  const LossConfig& cfg) {
    std::int64_t nq = layer.logits.shape()[0];
    const auto& logits = layer.logits.data();
    const auto& masks = layer.masks.data();  // S x Nq x h4 x w4
    auto ms = layer.masks.shape();
    std::int64_t hw = ms[2] * ms[3], n_pts = static_cast<std::int64_t>(pts.size());

    std::vector<double> cost(static_cast<std::size_t>(nq) * n_gt);
    for (std::int64_t q = 0; q < nq; ++q) {
        double m = std::max(logits[q * 2], logits[q * 2 + 1]);
        double e0 = std::exp(logits[q * 2] - m), e1 = std::exp(logits[q * 2 + 1] - m);
        double p_obj = e1 / (e0 + e1);
        // gather the query's mask logits at the sampled cells once
        std::vector<double> x(static_cast<std::size_t>(n_pts));
        for (std::int64_t k = 0; k < n_pts; ++k) {
            std::int64_t flat = pts[k];          // s * hw + cell
            std::int64_t s = flat / hw, c = flat % hw;
            x[k] = masks[(s * nq + q) * hw + c];
        }
        for (int g = 0; g < n_gt; ++g) {
            double bce = 0, inter = 0, psum = 0, gsum = 0;
            for (std::int64_t k = 0; k < n_pts; ++k) {
                double t = cell_ids[pts[k]] == g + 1 ? 1.0 : 0.0;
                double sp = x[k] > 0 ? x[k] + std::log1p(std::exp(-x[k]))
                                     : std::log1p(std::exp(x[k]));
                bce += sp - x[k] * t;
                double p = 1.0 / (1.0 + std::exp(-x[k]));
                inter += p * t;
                psum += p;
                gsum += t;
            }
            bce /= n_pts;
            double dice = 1.0 - (2 * inter + 1) / (psum + gsum + 1);
            cost[q * n_gt + g] = cfg.lambda_cls * (1.0 - p_obj) + cfg.lambda_bce * bce +
                                 cfg.lambda_dice * dice;
        }
    }
    return cost;
}

}  // namespace

MatchResult match_queries(const LayerOutput& layer, const SceneSample& sm,
                          const std::vector<std::uint16_t>& cell_ids,
                          const LossConfig& cfg, std::uint64_t seed) {
    MatchResult res;
    std::int64_t nq = layer.logits.shape()[0];
    std::int64_t n_cells = static_cast<std::int64_t>(cell_ids.size());
    RngStream rng(seed, "loss-points");
    if (n_cells <= cfg.match_samples) {
        res.sample_points.resize(n_cells);
        std::iota(res.sample_points.begin(), res.sample_points.end(), 0);
    } else {
        res.sample_points.reserve(cfg.match_samples);
        for (int k = 0; k < cfg.match_samples; ++k)
            res.sample_points.push_back(static_cast<std::int64_t>(rng.next_below(n_cells)));
    }
    res.query_to_gt.assign(nq, -1);
    if (sm.instance_count == 0) return res;
    auto cost = matching_cost(layer, cell_ids, res.sample_points, sm.instance_count, cfg);
    res.query_to_gt = hungarian(cost, static_cast<int>(nq), sm.instance_count);
    return res;
}

LossBreakdown total_loss(const Model::ForwardResult& result, const SceneSample& sm,
                         const LossConfig& cfg, double progress, std::uint64_t seed) {
    LossBreakdown out;
    auto cell_ids = gt_cell_ids(sm);
    const int n_layers = static_cast<int>(result.output.layers.size());
    Tensor total = Tensor::scalar(0.0);

    for (int l = 0; l < n_layers; ++l) {
        const auto& layer = result.output.layers[l];
        auto match = match_queries(layer, sm, cell_ids, cfg, seed ^ (0x9e37ULL * (l + 1)));
        if (l == n_layers - 1) out.final_match = match.query_to_gt;
        std::int64_t nq = layer.logits.shape()[0];
        auto ms = layer.masks.shape();
        std::int64_t hw = ms[2] * ms[3];
        std::string tag = "layer" + std::to_string(l) + ".";

        std::vector<int> labels(nq, 0);
        for (std::int64_t q = 0; q < nq; ++q) labels[q] = match.query_to_gt[q] >= 0 ? 1 : 0;
        auto cls = focal_loss(layer.logits, labels, cfg.alpha, cfg.gamma) * cfg.lambda_cls;
        out.terms[tag + "cls"] = cls.item();
        total = total + cls;

        // mask terms over matched pairs on the shared subsample
        std::int64_t n_pts = static_cast<std::int64_t>(match.sample_points.size());
        Tensor bce_acc = Tensor::scalar(0.0), dice_acc = Tensor::scalar(0.0);
        int matched = 0;
        auto flat = reshape(layer.masks, {ms[0] * ms[1] * hw});
        for (std::int64_t q = 0; q < nq; ++q) {
            int g = match.query_to_gt[q];
            if (g < 0) continue;
            ++matched;
            std::vector<double> tgt(static_cast<std::size_t>(n_pts));
            for (std::int64_t k = 0; k < n_pts; ++k)
                tgt[k] = cell_ids[match.sample_points[k]] == g + 1 ? 1.0 : 0.0;
            // slice the query's mask logits at sampled cells, keeping the tape
            std::vector<Tensor> parts;
            parts.reserve(static_cast<std::size_t>(n_pts));
            for (std::int64_t k = 0; k < n_pts; ++k) {
                std::int64_t f = match.sample_points[k];
                std::int64_t s = f / hw, c = f % hw;
                std::int64_t idx = (s * ms[1] + q) * hw + c;
                parts.push_back(slice(flat, 0, idx, idx + 1));
            }
            auto x = concat(parts, 0);
            auto t = Tensor::from_data({n_pts}, tgt);
            bce_acc = bce_acc + bce_with_logits(x, t);
            dice_acc = dice_acc + dice_loss(x, t);
        }
        if (matched) {
            auto bce = bce_acc * (cfg.lambda_bce / matched);
            auto dice = dice_acc * (cfg.lambda_dice / matched);
            out.terms[tag + "bce"] = bce.item();
            out.terms[tag + "dice"] = dice.item();
            total = total + bce + dice;
        }
    }

    // overlap penalty on the final layer's confidence-weighted soft masks
    {
        const auto& layer = result.output.layers.back();
        auto ms = layer.masks.shape();
        std::int64_t nq = ms[1], m = ms[0] * ms[2] * ms[3];
        auto probs = sigmoid(reshape(permute(layer.masks, {1, 0, 2, 3}), {nq, m}));
        auto conf = slice(softmax(layer.logits, 1), 1, 1, 2);  // P(object)
        double w = overlap_weight(progress, cfg);
        auto ov = overlap_loss(probs, reshape(conf, {nq})) * w;
        out.terms["overlap"] = ov.item();
        total = total + ov;
    }

    // point contrastive loss on the shared mask-feature map (computed once)
    {
        const auto& fmask = result.pyramid.fmask;  // S x C x h4 x w4
        auto fs = fmask.shape();
        std::int64_t C = fs[1], hw = fs[2] * fs[3];
        RngStream rng(seed, "loss-contrastive");
        std::vector<std::vector<std::int64_t>> per_inst(sm.instance_count + 1);
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(cell_ids.size()); ++i)
            if (cell_ids[i]) per_inst[cell_ids[i]].push_back(i);
        std::vector<std::int64_t> pts;
        std::vector<int> labels;
        for (int g = 1; g <= sm.instance_count; ++g) {
            auto& cells = per_inst[g];
            int take = std::min<std::int64_t>(cfg.contrastive_per_instance,
                                              static_cast<std::int64_t>(cells.size()));
            for (int k = 0; k < take; ++k) {
                // partial Fisher-Yates draw without replacement
                std::int64_t j = k + static_cast<std::int64_t>(rng.next_below(cells.size() - k));
                std::swap(cells[k], cells[j]);
                pts.push_back(cells[k]);
                labels.push_back(g);
            }
        }
        if (pts.size() >= 2) {
            auto flat = reshape(permute(fmask, {0, 2, 3, 1}), {fs[0] * hw, C});
            std::vector<Tensor> rows;
            rows.reserve(pts.size());
            for (auto f : pts) rows.push_back(slice(flat, 0, f, f + 1));
            auto z = concat(rows, 0);
            auto geo = contrastive_loss(z, labels, cfg.tau) * cfg.lambda_geo;
            out.terms["geo"] = geo.item();
            total = total + geo;
        } else {
            out.terms["geo"] = 0.0;
        }
    }

    out.total = total;
    return out;
}

}  // namespace anchorseg
