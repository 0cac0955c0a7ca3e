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

#include "longmem/pipeline.hpp"

#include "longmem/composite_basis.hpp"
#include "longmem/error.hpp"
#include "longmem/group_regression.hpp"
#include "longmem/hashing.hpp"
#include "longmem/inference_maps.hpp"
#include "longmem/log.hpp"
#include "longmem/matrix_io.hpp"
#include "longmem/simulate.hpp"
#include "longmem/subject_estimator.hpp"
#include "longmem/volume_io.hpp"
#include "longmem/wavelet.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

namespace longmem {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* const kSimulate = "simulate";
const char* const kEstimate = "estimate-subject";
const char* const kBasis = "build-basis";
const char* const kGroup = "group-regress";
const char* const kInfer = "infer";
const char* const kReport = "report";

std::string utc_now()
{
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string volume_ext(const PipelineConfig& c) { return "." + c.resolved["volume_format"].get<std::string>(); }

std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ','))
        out.push_back(cell);
    if (!line.empty() && line.back() == ',')
        out.emplace_back();
    return out;
}

// ---------------------------------------------------------------------------
// Study inputs: external data or the simulate stage's outputs.

struct SubjectEntry {
    std::string id;
    fs::path path;
};

struct StudyInputs {
    fs::path subjects_csv;
    fs::path mask;
    fs::path parcellation;
    fs::path covariates;
    fs::path ground_truth;  // empty when unknown
};

bool external_data(const PipelineConfig& c) { return !c.resolved["data"]["subjects_csv"].is_null(); }

StudyInputs study_inputs(const PipelineConfig& c)
{
    StudyInputs in;
    if (external_data(c)) {
        in.subjects_csv = c.path_at("/data/subjects_csv");
        in.mask = c.path_at("/data/mask");
        in.parcellation = c.path_at("/data/parcellation");
        in.covariates = c.path_at("/data/covariates");
        if (in.parcellation.empty() || in.covariates.empty())
            throw UsageError("config /data needs parcellation and covariates when subjects_csv is set");
    } else {
        const fs::path sim = c.output_dir() / kSimulate;
        const std::string ext = volume_ext(c);
        in.subjects_csv = sim / "subjects.csv";
        in.mask = sim / ("mask" + ext);
        in.parcellation = sim / ("parcellation" + ext);
        in.covariates = sim / "covariates.csv";
        in.ground_truth = sim / "ground_truth.csv";
    }
    if (!c.resolved["report"]["ground_truth"].is_null())
        in.ground_truth = c.path_at("/report/ground_truth");
    return in;
}

std::vector<SubjectEntry> read_subjects_csv(const fs::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open subject list " + path.string());
    std::string line;
    std::getline(in, line);
    const auto header = split_csv_line(line);
    if (header.size() < 2 || header[0] != "subject_id" || header[1] != "path")
        throw DataError("subject list must start with columns subject_id,path: " + path.string());
    std::vector<SubjectEntry> out;
    std::set<std::string> seen;
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        const auto f = split_csv_line(line);
        if (f.size() < 2)
            throw DataError("malformed subject row in " + path.string() + ": " + line);
        if (!seen.insert(f[0]).second)
            throw DataError("duplicate subject id '" + f[0] + "' in " + path.string());
        fs::path p = f[1];
        out.push_back({f[0], p.is_absolute() ? p : path.parent_path() / p});
    }
    if (out.size() < 2)
        throw DataError("subject list needs at least 2 subjects: " + path.string());
    return out;
}

BrainMask load_mask(const StudyInputs& in, const VolumeGrid* grid_hint)
{
    if (!in.mask.empty())
        return read_mask(in.mask);
    if (!grid_hint)
        throw DataError("no mask configured and no grid available");
    return BrainMask::full(*grid_hint);
}

VolumeGrid grid_of(const fs::path& volume) { return read_volume(volume).grid; }

std::vector<std::string> read_lines(const fs::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open " + path.string());
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty())
            out.push_back(line);
    return out;
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines)
{
    std::ofstream out(path, std::ios::trunc);
    for (const auto& l : lines)
        out << l << "\n";
    if (!out)
        throw DataError("cannot write " + path.string());
}

void write_lattice(const fs::path& path, const VolumeGrid& grid, const std::vector<double>& values, DataType dtype)
{
    Volume vol;
    vol.grid = grid;
    vol.nt = 1;
    vol.data = values;
    write_volume_full(path, vol, dtype);
}

std::vector<std::int64_t> diagnostic_voxels(std::int64_t n_voxels, std::int64_t count)
{
    std::vector<std::int64_t> out;
    count = std::min(count, n_voxels);
    for (std::int64_t k = 0; k < count; ++k)
        out.push_back(static_cast<std::int64_t>((static_cast<double>(k) + 0.5) * static_cast<double>(n_voxels) /
                                                static_cast<double>(count)));
    return out;
}

int levels_for(const PipelineConfig& c, std::size_t T)
{
    const int J = c.resolved["estimate"]["J"].get<int>();
    return J > 0 ? J : default_levels(dyadic_length(T));
}

// ---------------------------------------------------------------------------
// Stages. Each writes into `out` (the partial directory).

void run_simulate(const PipelineConfig& c, const fs::path& out)
{
    const json& s = c.resolved["simulate"];
    const auto g = s["grid"].get<std::array<std::int64_t, 3>>();
    const auto vs = s["voxel_size"].get<std::array<double, 3>>();
    const VolumeGrid grid = VolumeGrid::make(g, vs);
    const std::uint64_t seed = c.stage_seed(kSimulate);
    const std::string ext = volume_ext(c);

    const Parcellation parc = s["parcellation"] == "octant"
                                  ? octant_parcellation(grid)
                                  : voronoi_parcellation(grid, s["n_rois"].get<int>(), derive_seed(seed, 0x50415243ull));
    const BrainMask mask = BrainMask::full(grid);

    SyntheticSubjectSpec spec;
    spec.grid = grid;
    spec.mask = mask;
    spec.parcellation = harmonize(parc, mask);
    spec.T = s["T"].get<std::size_t>();
    if (dyadic_length(spec.T) != spec.T)
        throw UsageError("config /simulate/T must be a power of two");
    spec.J = s["J"].get<int>();
    spec.bank = s["bank"].get<std::string>();
    spec.alpha_field.assign(static_cast<std::size_t>(mask.size()), s["baseline_alpha"].get<double>());
    spec.nu_field.assign(static_cast<std::size_t>(mask.size()), s["nu"].get<double>());

    CovariateSimSpec cs;
    const json& cj = s["covariates"];
    cs.age_min = cj["age_range"][0].get<double>();
    cs.age_max = cj["age_range"][1].get<double>();
    cs.medication_rate = cj["medication_rate"].get<double>();
    cs.adhd_index_mean = cj["adhd_index_mean"].get<double>();
    cs.adhd_index_sd = cj["adhd_index_sd"].get<double>();
    const CovariateTable cov = simulate_covariates(s["n_subjects"].get<std::size_t>(), cs, seed);

    std::vector<GroupEffectSpec> effects;
    for (const auto& e : s["effects"])
        effects.push_back({e["covariate"].get<std::string>(), e["roi"].get<std::int32_t>(),
                           e["effect_size"].get<double>()});

    GroundTruth truth = ground_truth(spec, effects, cov);
    const Eigen::MatrixXd alpha = subject_alpha_fields(spec, effects, cov, &truth.clamp_events);

    std::vector<double> ones(static_cast<std::size_t>(mask.size()), 1.0);
    write_volume(out / ("mask" + ext), grid, ones, mask, DataType::int16);
    std::vector<double> labels(parc.label.begin(), parc.label.end());
    write_lattice(out / ("parcellation" + ext), grid, labels, DataType::int32);
    write_covariates(out / "covariates.csv", cov);
    write_ground_truth(out / "ground_truth.csv", truth);

    std::ofstream list(out / "subjects.csv", std::ios::trunc);
    list << "subject_id,path\n";
    for (Eigen::Index i = 0; i < cov.N(); ++i) {
        const std::string& id = cov.subject_ids[static_cast<std::size_t>(i)];
        const Dataset4D ds = simulate_subject(spec, alpha, static_cast<std::size_t>(i), id, seed, c.threads());
        const std::string file = id + "_bold" + ext;
        write_dataset(out / file, ds, mask, DataType::float32);
        list << id << ',' << file << "\n";
        log::info("simulated " + id);
    }
    if (!list)
        throw DataError("cannot write subject list");
}

struct EstimateOutputs {
    std::vector<std::string> diag_rows;
    std::vector<std::string> trace_rows;
    std::vector<std::string> scale_rows;
};

void estimate_one(const PipelineConfig& c, const Dataset4D& ds, const BrainMask& mask, std::uint32_t index,
                  bool keep_traces, const fs::path& out, EstimateOutputs& acc, std::vector<double>* alpha_row)
{
    const auto bank = FilterBank::by_name(c.resolved["estimate"]["bank"].get<std::string>());
    const int J = levels_for(c, static_cast<std::size_t>(ds.T));
    if (const auto td = dyadic_length(static_cast<std::size_t>(ds.T)); td != static_cast<std::size_t>(ds.T))
        log::warn(ds.subject_id + ": using the first " + std::to_string(td) + " of " + std::to_string(ds.T) +
                  " time points");
    const auto sample = diagnostic_voxels(ds.n_voxels(), c.resolved["estimate"]["diagnostic_voxels"].get<std::int64_t>());
    std::vector<VoxelChain> chains;
    const LongMemoryMap map = estimate_subject(ds, bank, J, c.subject_priors(), c.chain_config(), index, c.threads(),
                                               &sample, keep_traces ? &chains : nullptr);
    if (!map.degenerate.empty())
        log::warn(ds.subject_id + ": " + std::to_string(map.degenerate.size()) +
                  " zero-variance voxel(s) skipped");

    const std::string ext = volume_ext(c);
    write_volume(out / (ds.subject_id + "_alpha_mean" + ext), ds.grid, map.alpha_mean, mask);
    write_volume(out / (ds.subject_id + "_alpha_sd" + ext), ds.grid, map.alpha_sd, mask);
    write_volume(out / (ds.subject_id + "_nu_mean" + ext), ds.grid, map.nu_mean, mask);
    write_volume(out / (ds.subject_id + "_acceptance" + ext), ds.grid, map.acceptance, mask);
    if (alpha_row)
        *alpha_row = map.alpha_mean;

    std::ostringstream os;
    os << std::setprecision(10);
    for (std::size_t k = 0; k < sample.size(); ++k) {
        const auto v = static_cast<std::size_t>(sample[k]);
        os.str("");
        os << ds.subject_id << ',' << v << ',' << map.alpha_mean[v] << ',' << map.alpha_median[v] << ','
           << map.alpha_sd[v] << ',' << map.nu_mean[v] << ',' << map.acceptance[v] << ',' << map.ess[v];
        acc.diag_rows.push_back(os.str());

        // Per-scale empirical variance of the centered series against the fitted progression.
        auto y = ds.series(sample[k]);
        std::vector<double> centered(y.begin(), y.end());
        double mean = 0.0;
        for (double x : centered)
            mean += x;
        mean /= static_cast<double>(centered.size());
        for (double& x : centered)
            x -= mean;
        const auto stats = sufficient_stats(dwt_forward(centered, bank, J));
        for (int m = 1; m <= J; ++m) {
            const double emp = stats.sumsq[static_cast<std::size_t>(m - 1)] /
                               static_cast<double>(stats.count[static_cast<std::size_t>(m - 1)]);
            const double fit = std::isfinite(map.alpha_mean[v]) ? map.nu_mean[v] * std::exp2(-map.alpha_mean[v] * m)
                                                                : std::nan("");
            os.str("");
            os << ds.subject_id << ',' << v << ',' << m << ',' << stats.count[static_cast<std::size_t>(m - 1)] << ','
               << emp << ',' << fit;
            acc.scale_rows.push_back(os.str());
        }
        if (keep_traces) {
            const VoxelChain& ch = chains[k];
            for (std::size_t t = 0; t < ch.alpha.size(); ++t) {
                os.str("");
                os << ds.subject_id << ',' << v << ',' << t << ',' << ch.alpha[t] << ',' << ch.nu[t];
                acc.trace_rows.push_back(os.str());
            }
        }
    }
}

void write_csv(const fs::path& path, const std::string& header, const std::vector<std::string>& rows)
{
    std::ofstream out(path, std::ios::trunc);
    out << header << "\n";
    for (const auto& r : rows)
        out << r << "\n";
    if (!out)
        throw DataError("cannot write " + path.string());
}

void run_estimate(const PipelineConfig& c, const fs::path& out)
{
    const StudyInputs in = study_inputs(c);
    const auto subjects = read_subjects_csv(in.subjects_csv);
    const VolumeGrid grid = grid_of(subjects.front().path);
    const BrainMask mask = load_mask(in, &grid);
    const auto n_trace = c.resolved["estimate"]["trace_subjects"].get<std::size_t>();

    EstimateOutputs acc;
    Eigen::MatrixXd stack(static_cast<Eigen::Index>(subjects.size()), mask.size());
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < subjects.size(); ++i) {
        Dataset4D ds = read_dataset(subjects[i].path, &mask);
        ds.subject_id = subjects[i].id;
        std::vector<double> alpha;
        estimate_one(c, ds, mask, static_cast<std::uint32_t>(i), i < n_trace, out, acc, &alpha);
        stack.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(alpha.data(), mask.size());
        ids.push_back(subjects[i].id);
        log::info("estimated " + subjects[i].id);
    }
    write_matrix(out / "alpha_stack.bin", stack);
    write_lines(out / "subjects.txt", ids);
    write_csv(out / "diagnostics.csv", "subject,voxel,alpha_mean,alpha_median,alpha_sd,nu_mean,acceptance,ess",
              acc.diag_rows);
    write_csv(out / "traces.csv", "subject,voxel,draw,alpha,nu", acc.trace_rows);
    write_csv(out / "scale_variances.csv", "subject,voxel,scale,n_coef,empirical_var,fitted_var", acc.scale_rows);
}

MaskedParcellation load_parcellation(const StudyInputs& in, const BrainMask& mask)
{
    const Parcellation parc = read_parcellation(in.parcellation);
    if (!parc.grid.same_as(mask.grid))
        throw DataError("parcellation grid does not match the mask");
    return harmonize(parc, mask);
}

// Degenerate voxels (NaN) take the subject's mean over the rest of their ROI.
std::int64_t impute_missing(Eigen::MatrixXd& stack, const MaskedParcellation& parc)
{
    std::int64_t filled = 0;
    for (Eigen::Index i = 0; i < stack.rows(); ++i) {
        for (std::size_t r = 0; r < parc.members.size(); ++r) {
            double sum = 0.0;
            std::int64_t n = 0;
            for (auto v : parc.members[r])
                if (std::isfinite(stack(i, v))) {
                    sum += stack(i, v);
                    ++n;
                }
            for (auto v : parc.members[r]) {
                if (std::isfinite(stack(i, v)))
                    continue;
                if (n == 0)
                    throw DataError("ROI " + std::to_string(parc.roi_ids[r]) + " has no estimable voxel for subject " +
                                    std::to_string(i));
                stack(i, v) = sum / static_cast<double>(n);
                ++filled;
            }
        }
    }
    return filled;
}

void run_basis(const PipelineConfig& c, const fs::path& out)
{
    const StudyInputs in = study_inputs(c);
    const fs::path est = c.output_dir() / kEstimate;
    Eigen::MatrixXd stack = read_matrix(est / "alpha_stack.bin");
    const auto ids = read_lines(est / "subjects.txt");
    const auto subjects = read_subjects_csv(in.subjects_csv);
    const VolumeGrid grid = grid_of(subjects.front().path);
    const BrainMask mask = load_mask(in, &grid);
    const MaskedParcellation parc = load_parcellation(in, mask);
    if (stack.cols() != mask.size())
        throw DataError("alpha stack does not match the mask");
    const std::int64_t filled = impute_missing(stack, parc);
    if (filled > 0)
        log::warn("imputed " + std::to_string(filled) + " degenerate voxel value(s) with ROI means");

    const CompositeBasis basis =
        fit_composite_basis(stack, parc, c.resolved["basis"]["local_threshold"].get<double>(),
                            c.resolved["basis"]["global_threshold"].get<double>(), c.threads());
    save_basis(out / "basis", basis);
    write_matrix(out / "alpha_stack_imputed.bin", stack);
    write_lines(out / "subjects.txt", ids);
    write_matrix(out / "projected.bin", project(stack, basis));

    std::ofstream s(out / "basis_summary.csv", std::ios::trunc);
    s << std::setprecision(10) << "level,roi,n_voxels,k,variance_kept\n";
    for (const auto& b : basis.local)
        s << "local," << b.roi_id << ',' << b.n_voxels() << ',' << b.k << ',' << b.variance_kept << "\n";
    s << "global,0," << basis.n_voxels << ',' << basis.global.pc << ',' << basis.global.variance_kept << "\n";
}

CovariateTable load_covariates(const PipelineConfig& c, const StudyInputs& in, const std::vector<std::string>& ids)
{
    const auto cols = c.resolved["group"]["covariates"].get<std::vector<std::string>>();
    return read_covariates(in.covariates, cols, &ids);
}

void run_group(const PipelineConfig& c, const fs::path& out)
{
    const StudyInputs in = study_inputs(c);
    const fs::path bdir = c.output_dir() / kBasis;
    const CompositeBasis basis = load_basis(bdir / "basis");
    const Eigen::MatrixXd stack = read_matrix(bdir / "alpha_stack_imputed.bin");
    const auto ids = read_lines(bdir / "subjects.txt");
    const CovariateTable cov = load_covariates(c, in, ids);

    const Eigen::MatrixXd projected = project(stack, basis);
    const bool standardize = c.resolved["group"]["standardize"].get<bool>();
    const Standardization st = standardize ? Standardization::fit(cov.Z) : Standardization::identity(cov.Q());
    const GroupPriors priors = c.group_priors(st.apply(cov.Z));
    const GroupPosterior post =
        fit_group(projected, cov.Z, cov.column_names, priors, c.group_config(), standardize, c.threads());
    save_draw_archive(out / "draws", post);

    const auto n_trace = std::min<Eigen::Index>(c.resolved["group"]["trace_components"].get<Eigen::Index>(),
                                                post.n_components());
    std::ofstream tr(out / "traces.csv", std::ios::trunc);
    tr << std::setprecision(10) << "component,covariate,draw,beta_raw,delta2\n";
    for (Eigen::Index comp = 0; comp < n_trace; ++comp) {
        const ComponentDraws& d = post.components[static_cast<std::size_t>(comp)];
        const Eigen::MatrixXd raw = d.beta * post.standardization.to_raw.transpose();
        for (Eigen::Index q = 0; q < post.Q(); ++q)
            for (Eigen::Index t = 0; t < raw.rows(); ++t)
                tr << comp << ',' << cov.column_names[static_cast<std::size_t>(q)] << ',' << t << ',' << raw(t, q)
                   << ',' << d.delta2[t] << "\n";
    }
}

std::vector<std::string> inference_covariates(const PipelineConfig& c, const std::vector<std::string>& names)
{
    std::vector<std::string> out;
    const json& sel = c.resolved["infer"]["covariates"];
    if (sel.is_null()) {
        for (const auto& n : names)
            if (n != "intercept")
                out.push_back(n);
    } else {
        for (const auto& n : sel.get<std::vector<std::string>>()) {
            if (std::find(names.begin(), names.end(), n) == names.end())
                throw UsageError("config /infer/covariates names unknown column '" + n + "'");
            out.push_back(n);
        }
    }
    return out;
}

void run_infer(const PipelineConfig& c, const fs::path& out)
{
    const StudyInputs in = study_inputs(c);
    const fs::path bdir = c.output_dir() / kBasis;
    const CompositeBasis basis = load_basis(bdir / "basis");
    const Eigen::MatrixXd stack = read_matrix(bdir / "alpha_stack_imputed.bin");
    const auto ids = read_lines(bdir / "subjects.txt");
    const CovariateTable cov = load_covariates(c, in, ids);
    const auto subjects = read_subjects_csv(in.subjects_csv);
    const VolumeGrid grid = grid_of(subjects.front().path);
    const BrainMask mask = load_mask(in, &grid);

    const json& ic = c.resolved["infer"];
    const double zeta = ic["zeta"].get<double>();
    const double fdr_q = ic["fdr_q"].get<double>();
    const int conn = ic["connectivity"].get<int>();
    const auto min_cluster = ic["min_cluster"].get<std::int64_t>();
    const std::string ext = volume_ext(c);

    ArchiveDrawSource source(c.output_dir() / kGroup / "draws");
    const auto& names = source.column_names();
    if (names != cov.column_names)
        throw DataError("draw archive covariates do not match the covariate table");
    std::vector<Eigen::Index> intercept_rows;
    for (std::size_t q = 0; q < names.size(); ++q)
        if (names[q] == "intercept")
            intercept_rows.push_back(static_cast<Eigen::Index>(q));
    BackprojectedStream stream(source, basis, intercept_rows);
    const JointBand band = joint_credible_band(stream, zeta);

    // Frequentist comparison: OLS on the maps reconstructed from the composite basis.
    std::vector<Eigen::Index> all_rows(static_cast<std::size_t>(stack.rows()));
    for (std::size_t i = 0; i < all_rows.size(); ++i)
        all_rows[i] = static_cast<Eigen::Index>(i);
    const Eigen::MatrixXd recon = backproject(project(stack, basis), basis, all_rows);
    const Eigen::MatrixXd tstat = ols_t_stats(recon, cov.Z, c.threads());
    const double df = static_cast<double>(cov.N() - cov.Q());

    std::vector<ClusterRow> rows;
    std::ofstream summary(out / "band.csv", std::ios::trunc);
    summary << std::setprecision(10)
            << "covariate,quantile,n_draws,excluded_voxels,flagged_voxels,bayes_voxels,bayes_clusters,fdr_voxels,"
               "fdr_clusters,intersection_voxels\n";
    for (const auto& name : inference_covariates(c, names)) {
        const auto q = static_cast<Eigen::Index>(std::find(names.begin(), names.end(), name) - names.begin());
        const auto& flagged = band.flagged[static_cast<std::size_t>(q)];
        const ClusterMap bayes = cluster_threshold(BinaryMap::from_masked(grid, mask, flagged), conn, min_cluster);

        const Eigen::VectorXd t_row = tstat.row(q).transpose();
        const auto fdr_raw = fdr_map(std::span<const double>(t_row.data(), static_cast<std::size_t>(t_row.size())),
                                     df, fdr_q);
        const ClusterMap fdr = cluster_threshold(BinaryMap::from_masked(grid, mask, fdr_raw), conn, min_cluster);
        const BinaryMap both = intersect_maps(bayes.map, fdr.map);
        const ClusterMap both_labels = cluster_threshold(both, conn, 1);

        const Eigen::VectorXd mean = band.mean.row(q).transpose();
        const Eigen::VectorXd sd = band.sd.row(q).transpose();
        const Eigen::VectorXd half = band.half_width(q);
        std::vector<double> zscore(static_cast<std::size_t>(mean.size()));
        for (Eigen::Index v = 0; v < mean.size(); ++v)
            zscore[static_cast<std::size_t>(v)] = sd[v] > 0.0 ? mean[v] / sd[v] : 0.0;

        auto as_vec = [](const Eigen::VectorXd& x) { return std::vector<double>(x.data(), x.data() + x.size()); };
        auto labels_of = [](const ClusterMap& m) { return std::vector<double>(m.label.begin(), m.label.end()); };
        auto on_of = [](const BinaryMap& m) { return std::vector<double>(m.on.begin(), m.on.end()); };
        write_volume(out / (name + "_beta_mean" + ext), grid, as_vec(mean), mask, DataType::float64);
        write_volume(out / (name + "_band_halfwidth" + ext), grid, as_vec(half), mask, DataType::float64);
        write_lattice(out / (name + "_bayes_sig" + ext), grid, on_of(bayes.map), DataType::int16);
        write_lattice(out / (name + "_bayes_clusters" + ext), grid, labels_of(bayes), DataType::int32);
        write_volume(out / (name + "_fdr_t" + ext), grid, as_vec(t_row), mask, DataType::float64);
        write_lattice(out / (name + "_fdr_sig" + ext), grid, on_of(fdr.map), DataType::int16);
        write_lattice(out / (name + "_fdr_clusters" + ext), grid, labels_of(fdr), DataType::int32);
        write_lattice(out / (name + "_intersection" + ext), grid, on_of(both), DataType::int16);

        const auto z_lat = to_lattice(mask, zscore);
        const auto t_lat = to_lattice(mask, as_vec(t_row));
        for (auto& r : cluster_table(bayes, z_lat, name, "bayes"))
            rows.push_back(r);
        for (auto& r : cluster_table(fdr, t_lat, name, "fdr"))
            rows.push_back(r);
        for (auto& r : cluster_table(both_labels, z_lat, name, "intersection"))
            rows.push_back(r);

        const auto n_flagged = std::count(flagged.begin(), flagged.end(), std::uint8_t{1});
        summary << name << ',' << band.quantile[q] << ',' << band.n_draws << ','
                << band.excluded[static_cast<std::size_t>(q)] << ',' << n_flagged << ',' << bayes.map.count() << ','
                << bayes.n_clusters() << ',' << fdr.map.count() << ',' << fdr.n_clusters() << ',' << both.count()
                << "\n";
    }
    write_cluster_table(out / "clusters.csv", rows);

    std::ofstream md(out / "max_deviation.csv", std::ios::trunc);
    md << std::setprecision(10) << "draw";
    for (const auto& n : names)
        md << ',' << n;
    md << "\n";
    for (Eigen::Index t = 0; t < band.max_dev.rows(); ++t) {
        md << t;
        for (Eigen::Index q = 0; q < band.max_dev.cols(); ++q)
            md << ',' << band.max_dev(t, q);
        md << "\n";
    }
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t col(const std::string& name) const
    {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end())
            throw DataError("table is missing column " + name);
        return static_cast<std::size_t>(it - header.begin());
    }
};

CsvTable read_csv(const fs::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw DataError("missing input " + path.string());
    CsvTable t;
    std::string line;
    std::getline(in, line);
    t.header = split_csv_line(line);
    while (std::getline(in, line))
        if (!line.empty())
            t.rows.push_back(split_csv_line(line));
    return t;
}

// ACF and histogram tables of every chain in a long-format trace table.
void chain_tables(const CsvTable& traces, const std::vector<std::string>& key_cols, const std::string& value_col,
                  std::ofstream& acf_out, std::ofstream& density_out, std::vector<json>& ess_out)
{
    std::map<std::vector<std::string>, std::vector<double>> chains;
    std::vector<std::vector<std::string>> order;
    std::vector<std::size_t> kc;
    for (const auto& k : key_cols)
        kc.push_back(traces.col(k));
    const std::size_t vc = traces.col(value_col);
    for (const auto& r : traces.rows) {
        std::vector<std::string> key;
        for (auto i : kc)
            key.push_back(r[i]);
        auto [it, inserted] = chains.try_emplace(key);
        if (inserted)
            order.push_back(key);
        it->second.push_back(std::stod(r[vc]));
    }
    for (const auto& key : order) {
        const auto& draws = chains[key];
        if (draws.size() < 100)
            continue;
        const ChainDiagnostics d = chain_diagnostics(draws);
        std::string prefix;
        for (const auto& k : key)
            prefix += k + ",";
        for (std::size_t lag = 0; lag < d.acf.size(); ++lag)
            acf_out << prefix << lag << ',' << d.acf[lag] << "\n";
        for (std::size_t b = 0; b < d.density_counts.size(); ++b)
            density_out << prefix << d.density_edges[b] << ',' << d.density_edges[b + 1] << ','
                        << d.density_counts[b] << "\n";
        json e = json::object();
        for (std::size_t i = 0; i < key.size(); ++i)
            e[key_cols[i]] = key[i];
        e["n"] = draws.size();
        e["ess"] = d.ess;
        e["degenerate"] = d.degenerate;
        ess_out.push_back(e);
    }
}

void run_report(const PipelineConfig& c, const fs::path& out)
{
    const StudyInputs in = study_inputs(c);
    const fs::path idir = c.output_dir() / kInfer;
    const fs::path edir = c.output_dir() / kEstimate;
    const fs::path gdir = c.output_dir() / kGroup;
    std::vector<std::string> missing;
    for (const fs::path& p : {idir / "band.csv", idir / "clusters.csv", edir / "traces.csv",
                              edir / "scale_variances.csv", gdir / "traces.csv", gdir / "draws" / "summary.csv"})
        if (!fs::exists(p))
            missing.push_back(p.string());
    if (!missing.empty()) {
        std::string msg = "report inputs missing:";
        for (const auto& m : missing)
            msg += " " + m;
        throw DataError(msg);
    }

    const json& ic = c.resolved["infer"];
    const double zeta = ic["zeta"].get<double>();
    const auto min_cluster = ic["min_cluster"].get<std::int64_t>();
    const std::string ext = volume_ext(c);
    const auto subjects = read_subjects_csv(in.subjects_csv);
    const VolumeGrid grid = grid_of(subjects.front().path);
    const BrainMask mask = load_mask(in, &grid);

    fs::copy_file(idir / "clusters.csv", out / "clusters.csv");
    fs::copy_file(edir / "scale_variances.csv", out / "scale_variances.csv");
    fs::copy_file(gdir / "draws" / "summary.csv", out / "group_summary.csv");

    json results = json::object();
    results["tool_version"] = kToolVersion;
    results["zeta"] = zeta;
    results["min_cluster"] = min_cluster;

    std::ostringstream text;
    text << "longmem report\n\n";
    const CsvTable band = read_csv(idir / "band.csv");
    std::vector<std::string> covs;
    json per_cov = json::object();
    for (const auto& r : band.rows) {
        const std::string& name = r[band.col("covariate")];
        covs.push_back(name);
        json e;
        e["band_quantile"] = std::stod(r[band.col("quantile")]);
        e["n_draws"] = std::stoll(r[band.col("n_draws")]);
        e["bayes_voxels"] = std::stoll(r[band.col("bayes_voxels")]);
        e["bayes_clusters"] = std::stoll(r[band.col("bayes_clusters")]);
        e["fdr_voxels"] = std::stoll(r[band.col("fdr_voxels")]);
        e["fdr_clusters"] = std::stoll(r[band.col("fdr_clusters")]);
        e["intersection_voxels"] = std::stoll(r[band.col("intersection_voxels")]);
        per_cov[name] = e;
        text << name << ": ";
        if (e["bayes_clusters"].get<std::int64_t>() == 0)
            text << no_cluster_message(zeta, min_cluster);
        else
            text << e["bayes_clusters"].get<std::int64_t>() << " cluster(s), " << e["bayes_voxels"].get<std::int64_t>()
                 << " voxels (joint band); " << e["fdr_clusters"].get<std::int64_t>() << " cluster(s), "
                 << e["fdr_voxels"].get<std::int64_t>() << " voxels (FDR); "
                 << e["intersection_voxels"].get<std::int64_t>() << " voxels in both";
        text << "\n";
    }
    results["covariates"] = per_cov;

    // Scoring against the simulation ground truth.
    json metrics = json::object();
    std::vector<std::string> metric_rows;
    if (!in.ground_truth.empty() && fs::exists(in.ground_truth)) {
        const GroundTruth truth = read_ground_truth(in.ground_truth);
        if (truth.beta.rows() != mask.size())
            throw DataError("ground truth does not match the mask");
        text << "\nground truth: " << in.ground_truth.filename().string() << "\n";
        for (const auto& name : covs) {
            auto it = std::find(truth.column_names.begin(), truth.column_names.end(), name);
            if (it == truth.column_names.end())
                continue;
            const auto j = static_cast<Eigen::Index>(it - truth.column_names.begin());
            for (const std::string method : {"bayes", "fdr"}) {
                const auto sig = read_masked_values(idir / (name + "_" + method + "_sig" + ext), mask);
                const auto lab = read_masked_values(idir / (name + "_" + method + "_clusters" + ext), mask);
                std::int64_t n_true = 0, tp = 0, fp = 0;
                std::map<std::int64_t, std::pair<std::int64_t, std::int64_t>> cl;  // label -> (inside, total)
                for (Eigen::Index v = 0; v < mask.size(); ++v) {
                    const bool truth_on = truth.beta(v, j) != 0.0;
                    const bool on = sig[static_cast<std::size_t>(v)] != 0.0;
                    n_true += truth_on;
                    tp += truth_on && on;
                    fp += !truth_on && on;
                    const auto l = static_cast<std::int64_t>(std::lround(lab[static_cast<std::size_t>(v)]));
                    if (l > 0) {
                        cl[l].second += 1;
                        cl[l].first += truth_on;
                    }
                }
                std::int64_t outside = 0, inside = 0;
                for (const auto& [l, counts] : cl) {
                    if (counts.first == 0)
                        ++outside;
                    else
                        ++inside;
                }
                json m;
                m["true_voxels"] = n_true;
                m["true_positive_voxels"] = tp;
                m["false_positive_voxels"] = fp;
                m["sensitivity"] = n_true > 0 ? static_cast<double>(tp) / static_cast<double>(n_true) : 0.0;
                m["null_voxels"] = mask.size() - n_true;
                m["false_positive_rate"] = mask.size() > n_true
                                               ? static_cast<double>(fp) / static_cast<double>(mask.size() - n_true)
                                               : 0.0;
                m["clusters_touching_truth"] = inside;
                m["clusters_outside_truth"] = outside;
                metrics[name][method] = m;
                std::ostringstream row;
                row << std::setprecision(10) << name << ',' << method << ',' << n_true << ',' << tp << ',' << fp << ','
                    << m["sensitivity"].get<double>() << ',' << m["false_positive_rate"].get<double>() << ','
                    << inside << ',' << outside;
                metric_rows.push_back(row.str());
                text << "  " << name << " [" << method << "] sensitivity " << m["sensitivity"].get<double>()
                     << ", false-positive voxels " << fp << ", clusters outside truth " << outside << "\n";
            }
        }
        write_csv(out / "metrics.csv",
                  "covariate,method,true_voxels,true_positive_voxels,false_positive_voxels,sensitivity,"
                  "false_positive_rate,clusters_touching_truth,clusters_outside_truth",
                  metric_rows);
    }
    results["metrics"] = metrics;

    // Chain diagnostics tables.
    std::vector<json> subject_ess, group_ess;
    {
        std::ofstream acf(out / "subject_acf.csv", std::ios::trunc), dens(out / "subject_density.csv", std::ios::trunc);
        acf << std::setprecision(10) << "subject,voxel,lag,acf\n";
        dens << std::setprecision(10) << "subject,voxel,bin_lo,bin_hi,count\n";
        chain_tables(read_csv(edir / "traces.csv"), {"subject", "voxel"}, "alpha", acf, dens, subject_ess);
    }
    {
        std::ofstream acf(out / "group_acf.csv", std::ios::trunc), dens(out / "group_density.csv", std::ios::trunc);
        acf << std::setprecision(10) << "component,covariate,lag,acf\n";
        dens << std::setprecision(10) << "component,covariate,bin_lo,bin_hi,count\n";
        chain_tables(read_csv(gdir / "traces.csv"), {"component", "covariate"}, "beta_raw", acf, dens, group_ess);
    }
    fs::copy_file(edir / "traces.csv", out / "subject_traces.csv");
    fs::copy_file(gdir / "traces.csv", out / "group_traces.csv");
    results["subject_chains"] = subject_ess;
    results["group_chains"] = group_ess;

    std::ofstream rj(out / "results.json", std::ios::trunc);
    rj << results.dump(2) << "\n";
    std::ofstream rt(out / "report.txt", std::ios::trunc);
    rt << text.str();
    if (!rj || !rt)
        throw DataError("cannot write report files");
}

// ---------------------------------------------------------------------------
// Manifest bookkeeping.

using HashMap = std::map<std::string, std::string>;

std::string rel_key(const fs::path& p, const fs::path& root)
{
    const fs::path abs = fs::weakly_canonical(p);
    const fs::path r = fs::weakly_canonical(root);
    auto rel = abs.lexically_relative(r);
    if (!rel.empty() && *rel.begin() != "..")
        return rel.generic_string();
    return abs.generic_string();
}

void hash_tree(const fs::path& dir, const fs::path& root, HashMap& out)
{
    if (!fs::exists(dir))
        return;
    if (fs::is_regular_file(dir)) {
        out[rel_key(dir, root)] = sha256_file(dir);
        return;
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file())
            files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files)
        out[rel_key(f, root)] = sha256_file(f);
}

json slice(const PipelineConfig& c, std::initializer_list<const char*> keys)
{
    json s = json::object();
    for (const char* k : keys)
        s[k] = c.resolved[k];
    return s;
}

struct Stage {
    std::string name;
    std::function<std::vector<fs::path>()> inputs;  // files or directories
    json config;                                      // settings the outputs depend on
    std::function<void(const fs::path&)> run;
};

std::vector<Stage> build_stages(const PipelineConfig& c)
{
    const fs::path o = c.output_dir();
    auto study_files = [&c]() {
        const StudyInputs in = study_inputs(c);
        std::vector<fs::path> files{in.subjects_csv, in.parcellation, in.covariates};
        if (!in.mask.empty())
            files.push_back(in.mask);
        if (fs::exists(in.subjects_csv))
            for (const auto& s : read_subjects_csv(in.subjects_csv))
                files.push_back(s.path);
        return files;
    };

    json sim_cfg = slice(c, {"volume_format", "simulate"});
    sim_cfg["simulate"]["seed"] = c.stage_seed(kSimulate);
    json est_cfg = slice(c, {"volume_format", "estimate"});
    est_cfg["estimate"]["seed"] = c.stage_seed("estimate");
    json grp_cfg = slice(c, {"group"});
    grp_cfg["group"]["seed"] = c.stage_seed("group");

    std::vector<Stage> stages;
    stages.push_back({kSimulate, [] { return std::vector<fs::path>{}; }, sim_cfg,
                      [&c](const fs::path& out) { run_simulate(c, out); }});
    stages.push_back({kEstimate, study_files, est_cfg, [&c](const fs::path& out) { run_estimate(c, out); }});
    stages.push_back({kBasis,
                      [&c, study_files, o] {
                          auto f = study_files();
                          f.push_back(o / kEstimate);
                          return f;
                      },
                      slice(c, {"basis"}), [&c](const fs::path& out) { run_basis(c, out); }});
    stages.push_back({kGroup,
                      [&c, study_files, o] {
                          auto f = study_files();
                          f.push_back(o / kBasis);
                          return f;
                      },
                      grp_cfg, [&c](const fs::path& out) { run_group(c, out); }});
    stages.push_back({kInfer,
                      [&c, study_files, o] {
                          auto f = study_files();
                          f.push_back(o / kBasis);
                          f.push_back(o / kGroup);
                          return f;
                      },
                      slice(c, {"volume_format", "infer"}), [&c](const fs::path& out) { run_infer(c, out); }});
    stages.push_back({kReport,
                      [&c, study_files, o] {
                          auto f = study_files();
                          f.push_back(o / kEstimate);
                          f.push_back(o / kGroup);
                          f.push_back(o / kInfer);
                          const StudyInputs in = study_inputs(c);
                          if (!in.ground_truth.empty())
                              f.push_back(in.ground_truth);
                          return f;
                      },
                      slice(c, {"volume_format", "infer", "report"}),
                      [&c](const fs::path& out) { run_report(c, out); }});
    return stages;
}

json load_manifest(const fs::path& path)
{
    if (!fs::exists(path))
        return json::object();
    std::ifstream in(path);
    try {
        return json::parse(in);
    } catch (const json::parse_error&) {
        log::warn("manifest " + path.string() + " is unreadable; starting a new one");
        return json::object();
    }
}

void save_manifest(const fs::path& path, const json& m)
{
    fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        out << m.dump(2) << "\n";
        if (!out)
            throw DataError("cannot write manifest " + path.string());
    }
    fs::rename(tmp, path);
}

[[noreturn]] void rethrow_with_stage(const std::string& stage)
{
    try {
        throw;
    } catch (const UsageError& e) {
        throw UsageError("stage " + stage + " failed: " + e.what());
    } catch (const NumericError& e) {
        throw NumericError("stage " + stage + " failed: " + e.what());
    } catch (const DataError& e) {
        throw DataError("stage " + stage + " failed: " + e.what());
    } catch (const std::exception& e) {
        throw DataError("stage " + stage + " failed: " + e.what());
    }
}

} // namespace

const std::vector<std::string>& stage_names()
{
    static const std::vector<std::string> names{kSimulate, kEstimate, kBasis, kGroup, kInfer, kReport};
    return names;
}

std::vector<std::string> parse_stage_list(const std::string& csv)
{
    std::set<std::string> wanted;
    for (const auto& s : split_csv_line(csv)) {
        if (s.empty())
            continue;
        if (std::find(stage_names().begin(), stage_names().end(), s) == stage_names().end())
            throw UsageError("unknown stage '" + s + "'");
        wanted.insert(s);
    }
    if (wanted.empty())
        throw UsageError("empty stage list");
    std::vector<std::string> out;
    for (const auto& s : stage_names())
        if (wanted.count(s))
            out.push_back(s);
    return out;
}

std::vector<std::string> default_stages(const PipelineConfig& config)
{
    std::vector<std::string> out;
    for (const auto& s : stage_names())
        if (s != kSimulate || !external_data(config))
            out.push_back(s);
    return out;
}

std::string no_cluster_message(double zeta, std::int64_t min_cluster)
{
    std::ostringstream os;
    os << "no clusters at ζ=" << zeta << ", min " << min_cluster << " voxels";
    return os.str();
}

RunResult run_pipeline(const PipelineConfig& config, const std::vector<std::string>& requested)
{
    std::vector<std::string> order;
    for (const auto& s : stage_names())
        if (std::find(requested.begin(), requested.end(), s) != requested.end())
            order.push_back(s);
    for (const auto& s : requested)
        if (std::find(stage_names().begin(), stage_names().end(), s) == stage_names().end())
            throw UsageError("unknown stage '" + s + "'");

    const fs::path root = config.output_dir();
    fs::create_directories(root);
    const fs::path mpath = config.manifest_path();
    json manifest = load_manifest(mpath);
    manifest["tool_version"] = kToolVersion;
    manifest["config"] = config.resolved;
    manifest["seeds"] = {{kSimulate, config.stage_seed(kSimulate)},
                         {kEstimate, config.stage_seed("estimate")},
                         {kGroup, config.stage_seed("group")}};
    if (!manifest.contains("created"))
        manifest["created"] = utc_now();
    if (!manifest.contains("stages"))
        manifest["stages"] = json::object();

    RunResult result;
    for (const auto& stage : build_stages(config)) {
        if (std::find(order.begin(), order.end(), stage.name) == order.end())
            continue;

        HashMap inputs;
        try {
            for (const auto& p : stage.inputs()) {
                if (!fs::exists(p))
                    throw DataError("missing input " + p.string());
                hash_tree(p, root, inputs);
            }
        } catch (...) {
            rethrow_with_stage(stage.name);
        }
        inputs["config"] = sha256_hex(stage.config.dump());
        inputs["tool_version"] = kToolVersion;

        const fs::path final_dir = root / stage.name;
        const json& prev = manifest["stages"].contains(stage.name) ? manifest["stages"][stage.name] : json();
        if (prev.is_object() && prev.value("status", "") == "complete" && prev["inputs"] == json(inputs) &&
            fs::exists(final_dir)) {
            HashMap outputs;
            hash_tree(final_dir, root, outputs);
            if (prev["outputs"] == json(outputs)) {
                log::info("stage " + stage.name + ": inputs unchanged, skipped");
                result.stages.push_back({stage.name, true});
                continue;
            }
            log::info("stage " + stage.name + ": outputs changed on disk, re-running");
        }

        const fs::path partial = root / (stage.name + ".partial");
        const fs::path failed = root / (stage.name + ".failed");
        fs::remove_all(partial);
        fs::create_directories(partial);
        json entry;
        entry["started"] = utc_now();
        log::info("stage " + stage.name + ": running");
        try {
            stage.run(partial);
        } catch (const std::exception& e) {
            fs::remove_all(failed);
            fs::rename(partial, failed);
            entry["status"] = "failed";
            entry["error"] = e.what();
            entry["finished"] = utc_now();
            manifest["stages"][stage.name] = entry;
            save_manifest(mpath, manifest);
            rethrow_with_stage(stage.name);
        }
        fs::remove_all(final_dir);
        fs::rename(partial, final_dir);
        fs::remove_all(failed);

        HashMap outputs;
        hash_tree(final_dir, root, outputs);
        entry["status"] = "complete";
        entry["inputs"] = inputs;
        entry["outputs"] = outputs;
        entry["config"] = stage.config;
        entry["finished"] = utc_now();
        manifest["stages"][stage.name] = entry;
        manifest["updated"] = utc_now();
        save_manifest(mpath, manifest);
        result.stages.push_back({stage.name, false});
    }
    result.manifest = manifest;
    return result;
}

void estimate_volume(const PipelineConfig& config, const fs::path& input, const fs::path& mask_path,
                     const fs::path& output_dir)
{
    const VolumeGrid grid = grid_of(input);
    const BrainMask mask = mask_path.empty() ? BrainMask::full(grid) : read_mask(mask_path);
    Dataset4D ds = read_dataset(input, &mask);
    std::string id = input.filename().string();
    for (const std::string suffix : {".nii.gz", ".nii", ".raw"})
        if (id.size() > suffix.size() && id.compare(id.size() - suffix.size(), suffix.size(), suffix) == 0) {
            id.resize(id.size() - suffix.size());
            break;
        }
    ds.subject_id = id;
    fs::create_directories(output_dir);
    EstimateOutputs acc;
    estimate_one(config, ds, mask, 0, false, output_dir, acc, nullptr);
    write_csv(output_dir / "diagnostics.csv", "subject,voxel,alpha_mean,alpha_median,alpha_sd,nu_mean,acceptance,ess",
              acc.diag_rows);
    write_csv(output_dir / "scale_variances.csv", "subject,voxel,scale,n_coef,empirical_var,fitted_var",
              acc.scale_rows);
}

} // namespace longmem
