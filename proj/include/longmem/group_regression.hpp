/*
   Copyright 2026 The longmem Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License.
*/

#pragma once

#include "longmem/composite_basis.hpp"
#include "longmem/matrix_io.hpp"
#include "longmem/rng.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace longmem {

/// beta | delta2 ~ N(mu0, delta2 * lambda0), delta2 ~ Inv-Gamma(k, l).
struct GroupPriors {
    Eigen::VectorXd mu0;
    Eigen::MatrixXd lambda0;
    double k = 0.1;
    double l = 0.5;

    /// mu0 = 0, lambda0 = scale * I.
    static GroupPriors isotropic(Eigen::Index Q, double scale = 0.5);
    /// mu0 = 0, lambda0 = g * (Z^T Z)^-1.
    static GroupPriors g_prior(const Eigen::MatrixXd& Z, double g = 100.0);

    void validate(Eigen::Index Q) const;
};

struct GroupConfig {
    int n_iter = 4000;
    int n_burn = 1000;
    int thin = 1;
    std::uint64_t seed = 0;

    void validate() const;
    int n_retained() const { return (n_iter - n_burn + thin - 1) / thin; }
};

/// Retained draws of one component: beta is n_retained x Q.
struct ComponentDraws {
    Eigen::MatrixXd beta;
    Eigen::VectorXd delta2;
};

/// Closed-form quantities of the conjugate posterior for one response vector.
struct ConjugatePosterior {
    Eigen::VectorXd mean;       // mu_n
    Eigen::MatrixXd precision;  // A = Z^T Z + lambda0^-1
    double shape = 0.0;         // k + N/2
    double rate = 0.0;          // l + (y^T y + mu0^T lambda0^-1 mu0 - mu_n^T A mu_n) / 2

    /// Marginal of beta is multivariate t with 2*shape dof, location mean,
    /// scale (rate/shape) * A^-1.
    Eigen::MatrixXd beta_scale() const;
};

ConjugatePosterior conjugate_posterior(const Eigen::VectorXd& y, const Eigen::MatrixXd& Z, const GroupPriors& priors);

/**
 * Gibbs sampler for one component:
 *   beta | delta2 ~ N(mu_n, delta2 A^-1)
 *   delta2 | beta ~ Inv-Gamma(k + (N + Q)/2, l + RSS/2 + (beta - mu0)^T lambda0^-1 (beta - mu0) / 2)
 * Throws DataError for N <= Q or a rank-deficient Z, NumericError if A is not SPD.
 */
ComponentDraws gibbs_component(const Eigen::VectorXd& y, const Eigen::MatrixXd& Z, const GroupPriors& priors,
                               const GroupConfig& config, Philox& rng);

/**
 * Optional z-scoring of continuous covariates. Column 0 is treated as the
 * intercept when it is constant 1; binary columns are left unscaled.
 * Standardized coefficients map to raw units by beta_raw = to_raw * beta_std.
 */
struct Standardization {
    Eigen::VectorXd center;
    Eigen::VectorXd scale;
    Eigen::MatrixXd to_raw;

    static Standardization identity(Eigen::Index Q);
    static Standardization fit(const Eigen::MatrixXd& Z);
    Eigen::MatrixXd apply(const Eigen::MatrixXd& Z) const;
};

struct GroupPosterior {
    std::vector<std::string> column_names;
    Standardization standardization;
    std::vector<ComponentDraws> components;  // standardized units
    Eigen::MatrixXd analytic_mean;           // Q x PC_f, standardized units

    Eigen::Index Q() const { return analytic_mean.rows(); }
    Eigen::Index n_components() const { return static_cast<Eigen::Index>(components.size()); }
    Eigen::Index n_draws() const { return components.empty() ? 0 : components.front().beta.rows(); }

    /// Q x PC_f coefficient matrix of draw t in raw covariate units.
    Eigen::MatrixXd draw(Eigen::Index t) const;
    /// Posterior means in raw units (Q x PC_f).
    Eigen::MatrixXd mean_raw() const;
    /// n_draws x PC_f residual variances.
    Eigen::MatrixXd delta2() const;
};

/**
 * Fit every column of `projected` (N x PC_f) independently. Component c
 * draws from Philox(derive_seed(config.seed, kGroupStreamTag), c).
 */
GroupPosterior fit_group(const Eigen::MatrixXd& projected, const Eigen::MatrixXd& Z,
                         const std::vector<std::string>& column_names, const GroupPriors& priors,
                         const GroupConfig& config, bool standardize = true, unsigned threads = 1);

/// Per-draw voxel-space coefficient map (Q x N_v, raw units).
using VoxelDrawSink = std::function<void(Eigen::Index draw, const Eigen::MatrixXd& voxel_coef)>;

/// Rows listed in `intercept_rows` get the basis centering added back.
void backproject_draws(const GroupPosterior& posterior, const CompositeBasis& basis, const VoxelDrawSink& sink,
                       const std::vector<Eigen::Index>& intercept_rows = {});

/// Sequential source of Q x PC_f component-space draws (raw units).
class DrawSource {
public:
    virtual ~DrawSource() = default;
    virtual Eigen::Index count() const = 0;
    virtual void rewind() = 0;
    virtual bool next(Eigen::MatrixXd& coef) = 0;
};

class PosteriorDrawSource : public DrawSource {
public:
    explicit PosteriorDrawSource(const GroupPosterior& posterior) : posterior_(posterior) {}
    Eigen::Index count() const override { return posterior_.n_draws(); }
    void rewind() override { next_ = 0; }
    bool next(Eigen::MatrixXd& coef) override;

private:
    const GroupPosterior& posterior_;
    Eigen::Index next_ = 0;
};

class ArchiveDrawSource : public DrawSource {
public:
    explicit ArchiveDrawSource(const std::filesystem::path& dir);
    Eigen::Index count() const override;
    void rewind() override { reader_.rewind(); }
    bool next(Eigen::MatrixXd& coef) override { return reader_.next(coef); }
    const std::vector<std::string>& column_names() const { return names_; }

private:
    MatrixSequenceReader reader_;
    std::vector<std::string> names_;
};

/**
 * Draw archive directory: draws.seq (Q x PC_f per draw, raw units),
 * delta2.bin, columns.txt and summary.csv (component, covariate, posterior
 * mean/sd in standardized and raw units, analytic mean).
 */
void save_draw_archive(const std::filesystem::path& dir, const GroupPosterior& posterior);

void write_group_summary(const std::filesystem::path& path, const GroupPosterior& posterior);

} // namespace longmem
