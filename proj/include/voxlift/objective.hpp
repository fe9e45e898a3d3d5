#pragma once

#include <limits>
#include <map>

#include "voxlift/decoder.hpp"

namespace voxlift {

/// Axis-aligned intersection-over-union in [0, 1]; 0 for disjoint boxes.
inline double iou3d(const Box3D& a, const Box3D& b) {
    a.validate();
    b.validate();
    double inter = 1.0;
    for (int ax = 0; ax < 3; ++ax) {
        const double ov = std::min(a.max(ax), b.max(ax)) - std::max(a.min(ax), b.min(ax));
        if (ov <= 0.0) return 0.0;
        inter *= ov;
    }
    const double uni = a.volume() + b.volume() - inter;
    return inter / uni;
}

struct DiouResult {
    double loss = 0.0;   // 1 - DIoU, in [0, 2)
    double diou = 0.0;   // IoU - penalty, in (-1, 1]
    double iou = 0.0;
    std::array<double, 6> grad{};  // d loss / d (cx, cy, cz, sx, sy, sz) of pred
};

namespace detail {

// Subgradient factor of max/min at an exact tie. The midpoint makes the
// composed loss gradient vanish at pred == gt, matching the zero-gradient
// contract at the (measure-zero) kink set.
inline double step_gt(double a, double b) { return a > b ? 1.0 : (a == b ? 0.5 : 0.0); }

}  // namespace detail

/// DIoU loss with the analytic gradient w.r.t. the predicted box parameters.
/// DIoU = IoU - |c_pred - c_gt|^2 / diag^2 with diag the diagonal of the
/// smallest axis-aligned box enclosing both.
inline DiouResult diou_loss(const Box3D& pred, const Box3D& gt) {
    pred.validate();
    gt.validate();

    // a perfect match sits on the kink set; loss and subgradient are exactly 0
    if (pred.center == gt.center && pred.size == gt.size) {
        DiouResult out;
        out.iou = 1.0;
        out.diou = 1.0;
        return out;
    }

    // per-axis overlap and enclosing extent, with d/dθ for θ = (center, size)
    double ov[3], d_ov_dc[3], d_ov_ds[3];
    double ext[3], d_ext_dc[3], d_ext_ds[3];
    for (int a = 0; a < 3; ++a) {
        const double pmin = pred.min(a), pmax = pred.max(a);
        const double gmin = gt.min(a), gmax = gt.max(a);

        const double lo_p = detail::step_gt(pmin, gmin);  // d lo / d pmin
        const double hi_p = detail::step_gt(gmax, pmax);  // d hi / d pmax
        const double raw = std::min(pmax, gmax) - std::max(pmin, gmin);
        const double pos = detail::step_gt(raw, 0.0);
        ov[a] = raw > 0.0 ? raw : 0.0;
        d_ov_dc[a] = pos * (hi_p - lo_p);
        d_ov_ds[a] = pos * 0.5 * (hi_p + lo_p);

        const double emin_p = detail::step_gt(gmin, pmin);  // d emin / d pmin
        const double emax_p = detail::step_gt(pmax, gmax);  // d emax / d pmax
        ext[a] = std::max(pmax, gmax) - std::min(pmin, gmin);
        d_ext_dc[a] = emax_p - emin_p;
        d_ext_ds[a] = 0.5 * (emax_p + emin_p);
    }

    const double inter = ov[0] * ov[1] * ov[2];
    const double vol_p = pred.volume();
    const double uni = vol_p + gt.volume() - inter;
    const double iou = inter / uni;

    double dist2 = 0.0, diag2 = 0.0;
    for (int a = 0; a < 3; ++a) {
        const double dc = pred.center[a] - gt.center[a];
        dist2 += dc * dc;
        diag2 += ext[a] * ext[a];
    }
    const double pen = dist2 / diag2;

    DiouResult out;
    out.iou = iou;
    out.diou = iou - pen;
    out.loss = 1.0 - out.diou;

    for (int a = 0; a < 3; ++a) {
        const double other = (a == 0 ? ov[1] * ov[2] : (a == 1 ? ov[0] * ov[2] : ov[0] * ov[1]));
        const double d_inter_dc = d_ov_dc[a] * other;
        const double d_inter_ds = d_ov_ds[a] * other;
        const double d_volp_ds = vol_p / pred.size[a];

        const double d_uni_dc = -d_inter_dc;
        const double d_uni_ds = d_volp_ds - d_inter_ds;
        const double d_iou_dc = (d_inter_dc * uni - inter * d_uni_dc) / (uni * uni);
        const double d_iou_ds = (d_inter_ds * uni - inter * d_uni_ds) / (uni * uni);

        const double d_dist2_dc = 2.0 * (pred.center[a] - gt.center[a]);
        const double d_diag2_dc = 2.0 * ext[a] * d_ext_dc[a];
        const double d_diag2_ds = 2.0 * ext[a] * d_ext_ds[a];
        const double d_pen_dc = (d_dist2_dc * diag2 - dist2 * d_diag2_dc) / (diag2 * diag2);
        const double d_pen_ds = (-dist2 * d_diag2_ds) / (diag2 * diag2);

        out.grad[a] = -d_iou_dc + d_pen_dc;
        out.grad[3 + a] = -d_iou_ds + d_pen_ds;
    }
    return out;
}

struct InfoNceResult {
    double loss = 0.0;
    Matrix grad_queries;            // N x C
    std::vector<double> grad_loc;   // C
};

/// InfoNCE over cosine similarities between query embeddings and the loc
/// token, one positive among N candidates:
///   s_j = cos(q_j, loc) / T,  loss = -log softmax(s)_positive
inline InfoNceResult info_nce(const Matrix& query_embs, const std::vector<double>& loc_emb,
                              std::size_t positive, double temperature) {
    const std::size_t n = query_embs.rows();
    const std::size_t c = query_embs.cols();
    if (!(temperature > 0.0)) throw std::invalid_argument("info_nce: temperature must be > 0");
    if (positive >= n) throw std::invalid_argument("info_nce: positive index out of range");
    if (loc_emb.size() != c) throw std::invalid_argument("info_nce: dim mismatch");

    const double loc_norm = std::sqrt(dot_n(loc_emb.data(), loc_emb.data(), c));
    if (loc_norm == 0.0) throw std::invalid_argument("info_nce: zero-norm loc embedding");

    std::vector<double> qnorm(n), cosv(n), s(n);
    for (std::size_t j = 0; j < n; ++j) {
        const double* q = query_embs.row(j);
        qnorm[j] = std::sqrt(dot_n(q, q, c));
        if (qnorm[j] == 0.0) throw std::invalid_argument("info_nce: zero-norm query embedding");
        cosv[j] = dot_n(q, loc_emb.data(), c) / (qnorm[j] * loc_norm);
        s[j] = cosv[j] / temperature;
    }

    double mx = -std::numeric_limits<double>::infinity();
    for (double v : s) mx = std::max(mx, v);
    double denom = 0.0;
    std::vector<double> p(n);
    for (std::size_t j = 0; j < n; ++j) {
        p[j] = std::exp(s[j] - mx);
        denom += p[j];
    }
    for (double& v : p) v /= denom;

    InfoNceResult out;
    out.loss = -std::log(p[positive]);
    out.grad_queries = Matrix(n, c);
    out.grad_loc.assign(c, 0.0);

    for (std::size_t j = 0; j < n; ++j) {
        const double dl_ds = (p[j] - (j == positive ? 1.0 : 0.0)) / temperature;
        const double* q = query_embs.row(j);
        double* gq = out.grad_queries.row(j);
        for (std::size_t t = 0; t < c; ++t) {
            // d cos / d q = loc/(|q||loc|) - cos * q/|q|^2
            gq[t] = dl_ds * (loc_emb[t] / (qnorm[j] * loc_norm) - cosv[j] * q[t] / (qnorm[j] * qnorm[j]));
            out.grad_loc[t] += dl_ds * (q[t] / (qnorm[j] * loc_norm) - cosv[j] * loc_emb[t] / (loc_norm * loc_norm));
        }
    }
    return out;
}

struct Assignment {
    std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;  // (row, col), row-sorted
    double cost = 0.0;
};

/// Minimum-cost one-to-one assignment (Hungarian with potentials). Rectangular
/// costs assign every row when rows <= cols; callers transpose otherwise.
/// Equal-cost optima are normalized toward lexicographically smaller pairs.
inline Assignment solve_assignment(const Matrix& cost) {
    const std::size_t n = cost.rows(), m = cost.cols();
    if (n == 0 || m == 0) throw std::invalid_argument("solve_assignment: empty cost matrix");
    if (n > m) throw std::invalid_argument("solve_assignment: needs rows <= cols");
    for (double v : cost.data())
        if (!std::isfinite(v)) throw std::invalid_argument("solve_assignment: non-finite cost");
    const double kInf = std::numeric_limits<double>::infinity();

    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, kInf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = kInf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
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
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    Assignment out;
    std::vector<std::uint32_t> col_of(n, 0);
    for (std::size_t j = 1; j <= m; ++j)
        if (p[j] != 0) col_of[p[j] - 1] = static_cast<std::uint32_t>(j - 1);
    for (std::size_t i = 0; i < n; ++i) {
        out.pairs.emplace_back(static_cast<std::uint32_t>(i), col_of[i]);
        out.cost += cost(i, col_of[i]);
    }

    // normalize ties: swap column pairs when the swapped total is identical
    // and lexicographically smaller
    bool changed = true;
    while (changed) {
        changed = false;
        for (std::size_t a = 0; a < out.pairs.size(); ++a) {
            for (std::size_t b = a + 1; b < out.pairs.size(); ++b) {
                auto& [ia, ja] = out.pairs[a];
                auto& [ib, jb] = out.pairs[b];
                if (jb < ja &&
                    cost(ia, jb) + cost(ib, ja) == cost(ia, ja) + cost(ib, jb)) {
                    std::swap(ja, jb);
                    changed = true;
                }
            }
        }
    }
    return out;
}

/// Optimal query-to-ground-truth matching under the (1 - DIoU) cost.
/// pairs are (pred index, gt index); |pairs| = min(#preds, #gts).
inline Assignment match(const std::vector<Box3D>& preds, const std::vector<Box3D>& gts) {
    if (preds.empty() || gts.empty()) throw std::invalid_argument("match: empty box list");
    const bool flip = preds.size() > gts.size();
    const std::size_t rows = flip ? gts.size() : preds.size();
    const std::size_t cols = flip ? preds.size() : gts.size();
    Matrix cost(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
            cost(i, j) = flip ? diou_loss(preds[j], gts[i]).loss : diou_loss(preds[i], gts[j]).loss;
    Assignment asn = solve_assignment(cost);
    if (flip) {
        for (auto& [r, c] : asn.pairs) std::swap(r, c);
        std::sort(asn.pairs.begin(), asn.pairs.end());
    }
    return asn;
}

struct MlpGrad {
    Matrix w1;
    std::vector<double> b1;
    Matrix w2;
    std::vector<double> b2;

    static MlpGrad zeros_like(const MlpWeights& w) {
        MlpGrad g;
        g.w1 = Matrix(w.w1.rows(), w.w1.cols());
        g.b1.assign(w.b1.size(), 0.0);
        g.w2 = Matrix(w.w2.rows(), w.w2.cols());
        g.b2.assign(w.b2.size(), 0.0);
        return g;
    }
};

struct LossReport {
    double diou_loss = 0.0;
    double infonce_loss = 0.0;
    MlpGrad box_head_grad;
};

/// Everything the box-head optimization needs from one decoded scene. The
/// decoder stays frozen, so per-layer query values are captured once.
struct TrainScene {
    std::vector<Matrix> values_per_layer;  // >= 1; back() is the final layer
    Matrix positions;                      // N x 3 query anchors
    std::vector<Box3D> gt_boxes;
    std::vector<double> loc_embedding;
};

struct TrainOptions {
    double temperature = 0.07;
    bool aux_loss = false;        // average the matched loss over every layer
    bool multi_positive = false;  // InfoNCE positives: all matched queries
};

/// Mean matched DIoU loss over scenes plus its analytic gradient w.r.t. the
/// box-head weights; also reports the (frozen-embedding) InfoNCE loss.
inline LossReport box_head_loss(const std::vector<TrainScene>& scenes, const MlpWeights& head,
                                const TrainOptions& opts = {}) {
    LossReport report;
    report.box_head_grad = MlpGrad::zeros_like(head);
    const std::size_t hid = head.hidden_dim();
    const std::size_t c = head.in_dim();

    std::size_t pair_count = 0;
    double infonce_total = 0.0;
    std::size_t infonce_count = 0;

    struct PairGrad {
        std::size_t query;
        std::array<double, 6> d_raw;
    };

    for (const TrainScene& scene : scenes) {
        const std::size_t first_layer = opts.aux_loss ? 0 : scene.values_per_layer.size() - 1;
        for (std::size_t l = first_layer; l < scene.values_per_layer.size(); ++l) {
            const Matrix& values = scene.values_per_layer[l];
            const std::vector<Box3D> boxes = box_head_forward(values, scene.positions, head);
            const Assignment asn = match(boxes, scene.gt_boxes);

            std::vector<PairGrad> grads;
            double best_diou = -std::numeric_limits<double>::infinity();
            std::size_t best_query = asn.pairs.empty() ? 0 : asn.pairs.front().first;
            std::vector<std::uint32_t> matched;

            for (const auto& [qi, gi] : asn.pairs) {
                const DiouResult r = diou_loss(boxes[qi], scene.gt_boxes[gi]);
                report.diou_loss += r.loss;
                ++pair_count;
                if (r.diou > best_diou) {
                    best_diou = r.diou;
                    best_query = qi;
                }
                matched.push_back(qi);

                // chain through the box parameterization: center = pos + raw[0:3]
                // (identity), size = softplus(raw[3:6]) + 1e-4
                std::array<double, 6> d_raw{};
                std::vector<double> hidden(hid), raw(6);
                head.forward_row(values.row(qi), raw.data(), hidden.data());
                for (int a = 0; a < 3; ++a) {
                    d_raw[a] = r.grad[a];
                    d_raw[3 + a] = r.grad[3 + a] * sigmoid(raw[3 + a]);
                }
                grads.push_back({qi, d_raw});
            }

            // backprop the accumulated output gradients through the MLP
            for (const PairGrad& pg : grads) {
                const double* x = values.row(pg.query);
                std::vector<double> pre(hid), h(hid);
                matvec_row(x, head.w1, pre.data());
                for (std::size_t t = 0; t < hid; ++t) {
                    pre[t] += head.b1[t];
                    h[t] = pre[t] > 0.0 ? pre[t] : 0.0;
                }
                for (std::size_t o = 0; o < 6; ++o) {
                    report.box_head_grad.b2[o] += pg.d_raw[o];
                    for (std::size_t t = 0; t < hid; ++t)
                        report.box_head_grad.w2(t, o) += h[t] * pg.d_raw[o];
                }
                for (std::size_t t = 0; t < hid; ++t) {
                    if (pre[t] <= 0.0) continue;
                    double dh = 0.0;
                    for (std::size_t o = 0; o < 6; ++o) dh += head.w2(t, o) * pg.d_raw[o];
                    report.box_head_grad.b1[t] += dh;
                    for (std::size_t r2 = 0; r2 < c; ++r2)
                        report.box_head_grad.w1(r2, t) += x[r2] * dh;
                }
            }

            // InfoNCE on the final layer only; embeddings are frozen here
            if (l + 1 == scene.values_per_layer.size() && !scene.loc_embedding.empty() &&
                !asn.pairs.empty()) {
                if (opts.multi_positive) {
                    for (std::uint32_t qi : matched) {
                        infonce_total += info_nce(values, scene.loc_embedding, qi, opts.temperature).loss;
                        ++infonce_count;
                    }
                } else {
                    infonce_total += info_nce(values, scene.loc_embedding, best_query, opts.temperature).loss;
                    ++infonce_count;
                }
            }
        }
    }

    if (pair_count > 0) {
        const double inv = 1.0 / static_cast<double>(pair_count);
        report.diou_loss *= inv;
        for (double& g : report.box_head_grad.w1.data()) g *= inv;
        for (double& g : report.box_head_grad.b1) g *= inv;
        for (double& g : report.box_head_grad.w2.data()) g *= inv;
        for (double& g : report.box_head_grad.b2) g *= inv;
    }
    if (infonce_count > 0) report.infonce_loss = infonce_total / static_cast<double>(infonce_count);
    return report;
}

struct TrainResult {
    std::vector<double> diou_losses;     // per step, before the update
    std::vector<double> infonce_losses;
    MlpWeights box_head;
    bool diverged = false;
    std::size_t diverged_step = 0;
};

/// Plain gradient descent on the mean matched DIoU loss, through the box head
/// only. Matching is recomputed every step.
inline TrainResult train_box_head(const std::vector<TrainScene>& scenes, MlpWeights head,
                                  std::size_t steps, double lr, const TrainOptions& opts = {}) {
    if (steps < 1) throw std::invalid_argument("train_box_head: steps must be >= 1");
    if (!(lr >= 0.0)) throw std::invalid_argument("train_box_head: lr must be >= 0");
    TrainResult result;
    result.diou_losses.reserve(steps);
    result.infonce_losses.reserve(steps);

    for (std::size_t step = 0; step < steps; ++step) {
        LossReport report;
        try {
            report = box_head_loss(scenes, head, opts);
        } catch (const std::invalid_argument&) {
            // overflowed box geometry (non-finite costs) is divergence
            result.diverged = true;
            result.diverged_step = step;
            break;
        }
        result.diou_losses.push_back(report.diou_loss);
        result.infonce_losses.push_back(report.infonce_loss);
        if (!std::isfinite(report.diou_loss)) {
            result.diverged = true;
            result.diverged_step = step;
            break;
        }
        for (std::size_t i = 0; i < head.w1.size(); ++i)
            head.w1.data()[i] -= lr * report.box_head_grad.w1.data()[i];
        for (std::size_t i = 0; i < head.b1.size(); ++i) head.b1[i] -= lr * report.box_head_grad.b1[i];
        for (std::size_t i = 0; i < head.w2.size(); ++i)
            head.w2.data()[i] -= lr * report.box_head_grad.w2.data()[i];
        for (std::size_t i = 0; i < head.b2.size(); ++i) head.b2[i] -= lr * report.box_head_grad.b2[i];
    }
    result.box_head = std::move(head);
    return result;
}

}  // namespace voxlift
