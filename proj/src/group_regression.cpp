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

#include "longmem/group_regression.hpp"

#include "longmem/error.hpp"
#include "longmem/log.hpp"
#include "longmem/parallel.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>

namespace longmem {

namespace fs = std::filesystem;

namespace {

Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& m, const char* what)
{
    Eigen::LLT<Eigen::MatrixXd> llt(m);
    if (llt.info() != Eigen::Success)
        throw NumericError(std::string(what) + " is not positive definite");
    return llt.solve(Eigen::MatrixXd::Identity(m.rows(), m.cols()));
}

void check_design(const Eigen::MatrixXd& Z)
{
    if (Z.rows() <= Z.cols())
        throw DataError("group regression needs more subjects (" + std::to_string(Z.rows()) + ") than covariates (" +
                        std::to_string(Z.cols()) + ")");
    if (!Z.allFinite())
        throw DataError("design matrix contains non-finite values");
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Z);
    if (qr.rank() < Z.cols())
        throw DataError("design matrix is rank-deficient (rank " + std::to_string(qr.rank()) + " < " +
                        std::to_string(Z.cols()) + ")");
}

bool is_intercept(const Eigen::VectorXd& c) { return (c.array() == 1.0).all(); }

bool is_binary(const Eigen::VectorXd& c)
{
    std::set<double> values(c.data(), c.data() + c.size());
    return values.size() <= 2;
}

} // namespace

GroupPriors GroupPriors::isotropic(Eigen::Index Q, double scale)
{
    GroupPriors p;
    p.mu0 = Eigen::VectorXd::Zero(Q);
    p.lambda0 = scale * Eigen::MatrixXd::Identity(Q, Q);
    return p;
}

GroupPriors GroupPriors::g_prior(const Eigen::MatrixXd& Z, double g)
{
    GroupPriors p;
    p.mu0 = Eigen::VectorXd::Zero(Z.cols());
    p.lambda0 = g * spd_inverse(Z.transpose() * Z, "Z^T Z");
    return p;
}

void GroupPriors::validate(Eigen::Index Q) const
{
    if (!(k > 0.0) || !(l > 0.0))
        throw UsageError("group prior k and l must be positive");
    if (mu0.size() != Q || lambda0.rows() != Q || lambda0.cols() != Q)
        throw UsageError("group prior dimensions do not match " + std::to_string(Q) + " covariates");
    if (!lambda0.isApprox(lambda0.transpose(), 1e-12))
        throw UsageError("group prior lambda0 must be symmetric");
    Eigen::LLT<Eigen::MatrixXd> llt(lambda0);
    if (llt.info() != Eigen::Success)
        throw UsageError("group prior lambda0 must be positive definite");
}

void GroupConfig::validate() const
{
    if (n_iter <= 0 || n_burn < 0 || n_burn >= n_iter || thin < 1)
        throw UsageError("group chain needs n_iter > n_burn >= 0 and thin >= 1");
}

Eigen::MatrixXd ConjugatePosterior::beta_scale() const
{
    return (rate / shape) * spd_inverse(precision, "posterior precision");
}

ConjugatePosterior conjugate_posterior(const Eigen::VectorXd& y, const Eigen::MatrixXd& Z, const GroupPriors& priors)
{
    priors.validate(Z.cols());
    const Eigen::MatrixXd prior_prec = spd_inverse(priors.lambda0, "lambda0");
    ConjugatePosterior post;
    post.precision = Z.transpose() * Z + prior_prec;
    Eigen::LLT<Eigen::MatrixXd> llt(post.precision);
    if (llt.info() != Eigen::Success)
        throw NumericError("posterior precision is not positive definite");
    const Eigen::VectorXd rhs = prior_prec * priors.mu0 + Z.transpose() * y;
    post.mean = llt.solve(rhs);
    post.shape = priors.k + 0.5 * static_cast<double>(Z.rows());
    const double quad = y.squaredNorm() + priors.mu0.dot(prior_prec * priors.mu0) - post.mean.dot(rhs);
    post.rate = priors.l + 0.5 * std::max(quad, 0.0);
    return post;
}

ComponentDraws gibbs_component(const Eigen::VectorXd& y, const Eigen::MatrixXd& Z, const GroupPriors& priors,
                               const GroupConfig& config, Philox& rng)
{
    config.validate();
    check_design(Z);
    if (y.size() != Z.rows())
        throw DataError("response length does not match design rows");
    if (!y.allFinite())
        throw DataError("projected maps contain non-finite values");

    const Eigen::Index N = Z.rows();
    const Eigen::Index Q = Z.cols();
    const ConjugatePosterior post = conjugate_posterior(y, Z, priors);
    const Eigen::MatrixXd prior_prec = spd_inverse(priors.lambda0, "lambda0");
    // A = L L^T, so L^-T z has covariance A^-1.
    const Eigen::LLT<Eigen::MatrixXd> llt(post.precision);
    const auto U = llt.matrixU();

    const double shape = priors.k + 0.5 * static_cast<double>(N + Q);
    double delta2 = post.rate / post.shape;
    Eigen::VectorXd beta(Q), z(Q);

    ComponentDraws out;
    out.beta.resize(config.n_retained(), Q);
    out.delta2.resize(config.n_retained());
    int kept = 0;
    for (int it = 0; it < config.n_iter; ++it) {
        for (Eigen::Index q = 0; q < Q; ++q)
            z[q] = rng.normal();
        beta = post.mean + std::sqrt(delta2) * U.solve(z);

        const Eigen::VectorXd resid = y - Z * beta;
        const Eigen::VectorXd dev = beta - priors.mu0;
        const double rate = priors.l + 0.5 * resid.squaredNorm() + 0.5 * dev.dot(prior_prec * dev);
        delta2 = rng.inv_gamma(shape, rate);

        if (it >= config.n_burn && (it - config.n_burn) % config.thin == 0) {
            out.beta.row(kept) = beta.transpose();
            out.delta2[kept] = delta2;
            ++kept;
        }
    }
    return out;
}

Standardization Standardization::identity(Eigen::Index Q)
{
    Standardization s;
    s.center = Eigen::VectorXd::Zero(Q);
    s.scale = Eigen::VectorXd::Ones(Q);
    s.to_raw = Eigen::MatrixXd::Identity(Q, Q);
    return s;
}

Standardization Standardization::fit(const Eigen::MatrixXd& Z)
{
    const Eigen::Index Q = Z.cols();
    Standardization s = identity(Q);
    const bool has_intercept = Q > 0 && is_intercept(Z.col(0));
    for (Eigen::Index j = 0; j < Q; ++j) {
        if (is_intercept(Z.col(j)) || is_binary(Z.col(j)))
            continue;
        const double mean = Z.col(j).mean();
        const double sd = std::sqrt((Z.col(j).array() - mean).square().sum() / static_cast<double>(Z.rows() - 1));
        if (!(sd > 0.0))
            continue;
        // Without an intercept, shifting a column changes the model; scale only.
        s.center[j] = has_intercept ? mean : 0.0;
        s.scale[j] = sd;
    }
    // beta_raw_j = beta_std_j / scale_j; the intercept absorbs the shifts.
    for (Eigen::Index j = 0; j < Q; ++j) {
        s.to_raw(j, j) = 1.0 / s.scale[j];
        if (has_intercept && j > 0)
            s.to_raw(0, j) = -s.center[j] / s.scale[j];
    }
    return s;
}

Eigen::MatrixXd Standardization::apply(const Eigen::MatrixXd& Z) const
{
    Eigen::MatrixXd out = Z;
    for (Eigen::Index j = 0; j < Z.cols(); ++j)
        out.col(j) = (Z.col(j).array() - center[j]) / scale[j];
    return out;
}

Eigen::MatrixXd GroupPosterior::draw(Eigen::Index t) const
{
    Eigen::MatrixXd coef(Q(), n_components());
    for (Eigen::Index c = 0; c < n_components(); ++c)
        coef.col(c) = components[static_cast<std::size_t>(c)].beta.row(t).transpose();
    return standardization.to_raw * coef;
}

Eigen::MatrixXd GroupPosterior::mean_raw() const
{
    Eigen::MatrixXd coef(Q(), n_components());
    for (Eigen::Index c = 0; c < n_components(); ++c)
        coef.col(c) = components[static_cast<std::size_t>(c)].beta.colwise().mean().transpose();
    return standardization.to_raw * coef;
}

Eigen::MatrixXd GroupPosterior::delta2() const
{
    Eigen::MatrixXd out(n_draws(), n_components());
    for (Eigen::Index c = 0; c < n_components(); ++c)
        out.col(c) = components[static_cast<std::size_t>(c)].delta2;
    return out;
}

GroupPosterior fit_group(const Eigen::MatrixXd& projected, const Eigen::MatrixXd& Z,
                         const std::vector<std::string>& column_names, const GroupPriors& priors,
                         const GroupConfig& config, bool standardize, unsigned threads)
{
    if (projected.rows() != Z.rows())
        throw DataError("projected maps have " + std::to_string(projected.rows()) + " subjects, design has " +
                        std::to_string(Z.rows()));
    if (!column_names.empty() && static_cast<Eigen::Index>(column_names.size()) != Z.cols())
        throw DataError("covariate names do not match design columns");
    config.validate();
    priors.validate(Z.cols());
    check_design(Z);

    GroupPosterior post;
    post.column_names = column_names;
    post.standardization = standardize ? Standardization::fit(Z) : Standardization::identity(Z.cols());
    const Eigen::MatrixXd Zs = post.standardization.apply(Z);

    const Eigen::Index PC = projected.cols();
    post.components.resize(static_cast<std::size_t>(PC));
    post.analytic_mean.resize(Z.cols(), PC);
    const std::uint64_t key = derive_seed(config.seed, kGroupStreamTag);
    parallel_for(static_cast<std::size_t>(PC), threads, [&](std::size_t c) {
        const Eigen::VectorXd y = projected.col(static_cast<Eigen::Index>(c));
        Philox rng(key, static_cast<std::uint32_t>(c), 0);
        post.components[c] = gibbs_component(y, Zs, priors, config, rng);
        post.analytic_mean.col(static_cast<Eigen::Index>(c)) = conjugate_posterior(y, Zs, priors).mean;
    });
    return post;
}

void backproject_draws(const GroupPosterior& posterior, const CompositeBasis& basis, const VoxelDrawSink& sink,
                       const std::vector<Eigen::Index>& intercept_rows)
{
    if (posterior.n_components() != basis.n_components())
        throw DataError("posterior has " + std::to_string(posterior.n_components()) + " components, basis has " +
                        std::to_string(basis.n_components()));
    for (Eigen::Index t = 0; t < posterior.n_draws(); ++t)
        sink(t, backproject(posterior.draw(t), basis, intercept_rows));
}

bool PosteriorDrawSource::next(Eigen::MatrixXd& coef)
{
    if (next_ >= posterior_.n_draws())
        return false;
    coef = posterior_.draw(next_++);
    return true;
}

ArchiveDrawSource::ArchiveDrawSource(const fs::path& dir) : reader_(dir / "draws.seq")
{
    std::ifstream in(dir / "columns.txt");
    if (!in)
        throw DataError("draw archive has no columns.txt: " + dir.string());
    std::string line;
    while (std::getline(in, line))
        if (!line.empty())
            names_.push_back(line);
    if (static_cast<Eigen::Index>(names_.size()) != reader_.rows())
        throw DataError("draw archive column names do not match draw rows");
}

Eigen::Index ArchiveDrawSource::count() const
{
    return static_cast<Eigen::Index>(reader_.count());
}

void save_draw_archive(const fs::path& dir, const GroupPosterior& posterior)
{
    fs::create_directories(dir);
    MatrixSequenceWriter seq(dir / "draws.seq", posterior.Q(), posterior.n_components());
    for (Eigen::Index t = 0; t < posterior.n_draws(); ++t)
        seq.append(posterior.draw(t));
    seq.close();
    write_matrix(dir / "delta2.bin", posterior.delta2());
    std::ofstream names(dir / "columns.txt", std::ios::trunc);
    for (Eigen::Index q = 0; q < posterior.Q(); ++q)
        names << (q < static_cast<Eigen::Index>(posterior.column_names.size())
                      ? posterior.column_names[static_cast<std::size_t>(q)]
                      : "x" + std::to_string(q))
              << "\n";
    if (!names)
        throw DataError("cannot write draw archive in " + dir.string());
    write_group_summary(dir / "summary.csv", posterior);
}

void write_group_summary(const fs::path& path, const GroupPosterior& posterior)
{
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw DataError("cannot write " + path.string());
    out << std::setprecision(10);
    out << "component,covariate,mean_std,sd_std,analytic_mean_std,mean_raw,sd_raw,delta2_mean\n";
    const Eigen::MatrixXd& T = posterior.standardization.to_raw;
    for (Eigen::Index c = 0; c < posterior.n_components(); ++c) {
        const ComponentDraws& d = posterior.components[static_cast<std::size_t>(c)];
        const Eigen::MatrixXd raw = d.beta * T.transpose();
        const double n = static_cast<double>(d.beta.rows());
        for (Eigen::Index q = 0; q < posterior.Q(); ++q) {
            auto sd = [n](const Eigen::VectorXd& x) {
                const double m = x.mean();
                return n > 1 ? std::sqrt((x.array() - m).square().sum() / (n - 1)) : 0.0;
            };
            const std::string name = q < static_cast<Eigen::Index>(posterior.column_names.size())
                                         ? posterior.column_names[static_cast<std::size_t>(q)]
                                         : "x" + std::to_string(q);
            out << c << ',' << name << ',' << d.beta.col(q).mean() << ',' << sd(d.beta.col(q)) << ','
                << posterior.analytic_mean(q, c) << ',' << raw.col(q).mean() << ',' << sd(raw.col(q)) << ','
                << d.delta2.mean() << "\n";
        }
    }
}

} // namespace longmem
