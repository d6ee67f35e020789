#pragma once

#include <string_view>

#include "partmim/mask_sampling.hpp"
#include "partmim/tensor.hpp"

namespace partmim {

enum class AlignMode { infonce, cosine_stopgrad };

/// Which batch supplies the softmax denominator of the InfoNCE term.
///   cross_view: sum_i exp(Z_b . Zt_i / t)  (includes the positive)
///   same_view:  sum_i exp(Z_b . Z_i / t)   (self term in, positive out; may go negative)
enum class AlignNegatives { cross_view, same_view };

std::string_view align_mode_name(AlignMode m);
AlignMode align_mode_from_name(std::string_view name);
std::string_view negatives_name(AlignNegatives n);
AlignNegatives negatives_from_name(std::string_view name);

struct LossConfig {
    double temperature = 0.2;
    double align_weight = 0.05;
    bool normalize_targets = true;
    double target_eps = 1e-6;
    AlignMode align_mode = AlignMode::infonce;
    AlignNegatives negatives = AlignNegatives::cross_view;
    /// Average the Z->Zt and Zt->Z directions.
    bool symmetric = false;

    void validate() const;
};

struct LossBreakdown {
    double recon = 0.0;
    double align = 0.0;
    double total = 0.0;
};

struct ReconResult {
    double value = 0.0;
    bool degenerate = false;  // empty mask
};

/// Mean over masked rows of the per-row mean squared error. When `d_pred`
/// is non-null it receives d(value)/d(pred), zero on visible rows.
ReconResult recon_loss(const Mat& pred, const Mat& target, const MaskPlan& plan,
                       const LossConfig& cfg, Mat* d_pred = nullptr);

/// InfoNCE over unit rows; Z anchors, Zt keys. Throws std::invalid_argument
/// when a row's norm deviates from 1 by more than 1e-4.
double align_loss(const Mat& z, const Mat& zt, double temperature,
                  AlignNegatives negatives = AlignNegatives::cross_view, Mat* dz = nullptr,
                  Mat* dzt = nullptr);

/// Symmetric negative cosine similarity with stop-gradient on the target
/// side of each term: -(1/2B) sum_b (Z_b . sg(Zt_b) + Zt_b . sg(Z_b)).
double align_loss_stopgrad(const Mat& z, const Mat& zt, Mat* dz = nullptr, Mat* dzt = nullptr);

/// Dispatches on cfg.align_mode / cfg.symmetric.
double alignment_term(const Mat& z, const Mat& zt, const LossConfig& cfg, Mat* dz = nullptr,
                      Mat* dzt = nullptr);

LossBreakdown total_loss(double recon, double align, const LossConfig& cfg);

}  // namespace partmim
