#include "partmim/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "partmim/error.hpp"
#include "partmim/geometry.hpp"
#include "partmim/layers.hpp"

namespace partmim {

namespace {

void check_unit_rows(const Mat& m, const char* which) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const double n = m.row(r).norm();
        if (!(std::abs(n - 1.0) <= 1e-4))
            throw std::invalid_argument(std::string("alignment input ") + which + " row " +
                                        std::to_string(r) + " has norm " + std::to_string(n) +
                                        ", expected unit length");
    }
}

void check_pair(const Mat& z, const Mat& zt) {
    if (z.rows() < 1 || z.rows() != zt.rows() || z.cols() != zt.cols())
        throw std::invalid_argument("alignment inputs must be non-empty batches of equal shape");
    check_unit_rows(z, "Z");
    check_unit_rows(zt, "Zt");
}

// -log-softmax of the diagonal, averaged, for a score matrix whose positive
// logits are `positive` (one per row).
double mean_nll(const Mat& scores, const Vec& positive, Mat& probs) {
    probs = layers::softmax_rows(scores);
    double total = 0.0;
    for (Eigen::Index b = 0; b < scores.rows(); ++b) {
        const double mx = scores.row(b).maxCoeff();
        const double lse = mx + std::log((scores.row(b).array() - mx).exp().sum());
        total += lse - positive(b);
    }
    return total / static_cast<double>(scores.rows());
}

}  // namespace

std::string_view align_mode_name(AlignMode m) {
    return m == AlignMode::infonce ? "infonce" : "cosine_stopgrad";
}

AlignMode align_mode_from_name(std::string_view name) {
    if (name == "infonce") return AlignMode::infonce;
    if (name == "cosine_stopgrad") return AlignMode::cosine_stopgrad;
    throw ConfigError("unknown align_mode '" + std::string(name) +
                      "' (expected infonce or cosine_stopgrad)");
}

std::string_view negatives_name(AlignNegatives n) {
    return n == AlignNegatives::cross_view ? "cross_view" : "same_view";
}

AlignNegatives negatives_from_name(std::string_view name) {
    if (name == "cross_view") return AlignNegatives::cross_view;
    if (name == "same_view") return AlignNegatives::same_view;
    throw ConfigError("unknown negatives '" + std::string(name) +
                      "' (expected cross_view or same_view)");
}

void LossConfig::validate() const {
    if (!(temperature > 0.0)) throw ConfigError("loss.temperature must be positive");
    if (!(align_weight >= 0.0)) throw ConfigError("loss.align_weight must be non-negative");
    if (!(target_eps > 0.0)) throw ConfigError("loss.target_eps must be positive");
}

ReconResult recon_loss(const Mat& pred, const Mat& target, const MaskPlan& plan,
                       const LossConfig& cfg, Mat* d_pred) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols() ||
        pred.rows() != plan.grid.n_patches())
        throw ConfigError("recon_loss: prediction, target and plan shapes disagree");
    if (d_pred) d_pred->setZero(pred.rows(), pred.cols());
    ReconResult res;
    if (plan.masked.empty()) {
        res.degenerate = true;
        return res;
    }
    const double scale = 1.0 / (static_cast<double>(plan.masked.size()) * pred.cols());
    const Mat targets = cfg.normalize_targets ? normalize_targets(target, cfg.target_eps) : target;
    double sum = 0.0;
    for (int idx : plan.masked) {
        const RowVec diff = pred.row(idx) - targets.row(idx);
        sum += diff.squaredNorm();
        if (d_pred) d_pred->row(idx) = 2.0 * scale * diff;
    }
    res.value = sum * scale;
    return res;
}

double align_loss(const Mat& z, const Mat& zt, double temperature, AlignNegatives negatives,
                  Mat* dz, Mat* dzt) {
    check_pair(z, zt);
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
    const double inv_t = 1.0 / temperature;
    const auto batch = static_cast<double>(z.rows());
    const Vec positive = (z.array() * zt.array()).rowwise().sum().matrix() * inv_t;
    Mat probs;
    if (negatives == AlignNegatives::cross_view) {
        const Mat scores = (z * zt.transpose()) * inv_t;
        const double loss = mean_nll(scores, positive, probs);
        if (dz || dzt) {
            Mat ds = probs;
            ds.diagonal().array() -= 1.0;
            ds /= batch;
            if (dz) *dz = (ds * zt) * inv_t;
            if (dzt) *dzt = (ds.transpose() * z) * inv_t;
        }
        return loss;
    }
    const Mat scores = (z * z.transpose()) * inv_t;
    const double loss = mean_nll(scores, positive, probs);
    if (dz) *dz = ((probs + probs.transpose()) * z - zt) * (inv_t / batch);
    if (dzt) *dzt = -z * (inv_t / batch);
    return loss;
}

double align_loss_stopgrad(const Mat& z, const Mat& zt, Mat* dz, Mat* dzt) {
    check_pair(z, zt);
    const auto batch = static_cast<double>(z.rows());
    const double sim = (z.array() * zt.array()).sum();
    // Each side receives gradient only from the term where it is the prediction.
    if (dz) *dz = -zt / (2.0 * batch);
    if (dzt) *dzt = -z / (2.0 * batch);
    return -sim / batch;
}

double alignment_term(const Mat& z, const Mat& zt, const LossConfig& cfg, Mat* dz, Mat* dzt) {
    if (cfg.align_mode == AlignMode::cosine_stopgrad) return align_loss_stopgrad(z, zt, dz, dzt);
    if (!cfg.symmetric) return align_loss(z, zt, cfg.temperature, cfg.negatives, dz, dzt);
    Mat dz1, dzt1, dz2, dzt2;
    const bool grads = dz || dzt;
    const double forward = align_loss(z, zt, cfg.temperature, cfg.negatives, grads ? &dz1 : nullptr,
                                      grads ? &dzt1 : nullptr);
    const double backward = align_loss(zt, z, cfg.temperature, cfg.negatives,
                                       grads ? &dzt2 : nullptr, grads ? &dz2 : nullptr);
    if (dz) *dz = 0.5 * (dz1 + dz2);
    if (dzt) *dzt = 0.5 * (dzt1 + dzt2);
    return 0.5 * (forward + backward);
}

LossBreakdown total_loss(double recon, double align, const LossConfig& cfg) {
    return {recon, align, recon + cfg.align_weight * align};
}

}  // namespace partmim
