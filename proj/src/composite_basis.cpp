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

#include "longmem/composite_basis.hpp"

#include "longmem/error.hpp"
#include "longmem/hashing.hpp"
#include "longmem/log.hpp"
#include "longmem/matrix_io.hpp"
#include "longmem/parallel.hpp"

#include <Eigen/SVD>

#include <charconv>
#include <fstream>
#include <sstream>

namespace longmem {

namespace fs = std::filesystem;

namespace {

void check_threshold(double t)
{
    if (!(t > 0.0 && t <= 1.0))
        throw UsageError("variance threshold must lie in (0, 1]");
}

// Largest-magnitude entry of each column made positive, so bases do not
// depend on the SVD backend's sign choices.
void fix_signs(Eigen::MatrixXd& v)
{
    for (Eigen::Index j = 0; j < v.cols(); ++j) {
        Eigen::Index imax = 0;
        v.col(j).cwiseAbs().maxCoeff(&imax);
        if (v(imax, j) < 0.0)
            v.col(j) = -v.col(j);
    }
}

struct Truncated {
    Eigen::MatrixXd v;
    Eigen::VectorXd sv;
    int k;
    double kept;
};

Truncated truncated_svd(const Eigen::MatrixXd& centered, double threshold)
{
    Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
    Truncated out;
    out.sv = svd.singularValues();
    out.k = retained_components(out.sv, threshold, &out.kept);
    out.v = svd.matrixV().leftCols(out.k);
    fix_signs(out.v);
    return out;
}

Eigen::MatrixXd gather_columns(const Eigen::MatrixXd& x, const std::vector<std::int64_t>& cols)
{
    Eigen::MatrixXd out(x.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j)
        out.col(static_cast<Eigen::Index>(j)) = x.col(cols[j]);
    return out;
}

std::string fmt(double x)
{
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

double parse_double(const std::string& s)
{
    double x = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), x);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw DataError("basis manifest: bad number '" + s + "'");
    return x;
}

std::string roi_stem(std::int32_t id) { return "roi_" + std::to_string(id); }

constexpr const char* kManifest = "manifest.txt";
constexpr const char* kHashKey = "content_sha256";

// Manifest text without its trailing hash line, plus the member files it names.
std::string manifest_body(const fs::path& dir, std::vector<fs::path>* members)
{
    std::ifstream in(dir / kManifest);
    if (!in)
        throw DataError("basis archive has no manifest: " + dir.string());
    std::string body, line;
    while (std::getline(in, line)) {
        if (line.rfind(kHashKey, 0) == 0)
            continue;
        body += line;
        body += '\n';
        if (members && line.rfind("roi ", 0) == 0) {
            std::istringstream ls(line.substr(4));
            std::int32_t id = 0;
            ls >> id;
            members->push_back(dir / (roi_stem(id) + ".bin"));
            members->push_back(dir / (roi_stem(id) + ".idx"));
            members->push_back(dir / (roi_stem(id) + "_sv.bin"));
        }
    }
    if (members) {
        members->push_back(dir / "global.bin");
        members->push_back(dir / "global_sv.bin");
    }
    return body;
}

} // namespace

Eigen::Index CompositeBasis::n_local_features() const
{
    Eigen::Index n = 0;
    for (const auto& b : local)
        n += b.k;
    return n;
}

double CompositeBasis::discarded_energy() const
{
    double e = 0.0;
    for (const auto& b : local)
        e += b.singular_values.tail(b.singular_values.size() - b.k).squaredNorm();
    e += global.singular_values.tail(global.singular_values.size() - global.pc).squaredNorm();
    return e;
}

int retained_components(const Eigen::VectorXd& singular_values, double threshold, double* kept)
{
    const double total = singular_values.squaredNorm();
    if (singular_values.size() == 0 || total <= 0.0) {
        if (kept)
            *kept = 1.0;
        return 1;
    }
    double acc = 0.0;
    int k = 0;
    for (Eigen::Index i = 0; i < singular_values.size(); ++i) {
        acc += singular_values[i] * singular_values[i];
        k = static_cast<int>(i) + 1;
        if (acc >= threshold * total)
            break;
    }
    if (kept)
        *kept = std::min(1.0, acc / total);
    return k;
}

std::vector<LocalBasis> fit_local_bases(const Eigen::MatrixXd& alpha_stack, const MaskedParcellation& parcellation,
                                        double variance_threshold, unsigned threads)
{
    check_threshold(variance_threshold);
    if (alpha_stack.rows() < 2)
        throw DataError("basis fitting needs at least 2 subjects");
    if (static_cast<std::size_t>(alpha_stack.cols()) != parcellation.label.size())
        throw DataError("alpha stack has " + std::to_string(alpha_stack.cols()) + " voxels, parcellation has " +
                        std::to_string(parcellation.label.size()));
    if (!alpha_stack.allFinite())
        throw DataError("alpha stack contains non-finite values");

    const std::size_t R = parcellation.roi_ids.size();
    std::vector<LocalBasis> out(R);
    parallel_for(R, threads, [&](std::size_t r) {
        const auto& members = parcellation.members[r];
        if (members.empty())
            throw DataError("ROI " + std::to_string(parcellation.roi_ids[r]) + " is empty");
        LocalBasis& b = out[r];
        b.roi_id = parcellation.roi_ids[r];
        b.voxels = members;
        Eigen::MatrixXd block = gather_columns(alpha_stack, members);
        b.centering = block.colwise().mean().transpose();
        block.rowwise() -= b.centering.transpose();
        Truncated t = truncated_svd(block, variance_threshold);
        b.eigvecs = std::move(t.v);
        b.singular_values = std::move(t.sv);
        b.k = t.k;
        b.variance_kept = t.kept;
    });
    return out;
}

Eigen::MatrixXd project_local(const Eigen::MatrixXd& alpha_stack, const std::vector<LocalBasis>& local)
{
    Eigen::Index total = 0;
    for (const auto& b : local)
        total += b.k;
    Eigen::MatrixXd out(alpha_stack.rows(), total);
    Eigen::Index off = 0;
    for (const auto& b : local) {
        Eigen::MatrixXd block = gather_columns(alpha_stack, b.voxels);
        block.rowwise() -= b.centering.transpose();
        out.middleCols(off, b.k).noalias() = block * b.eigvecs;
        off += b.k;
    }
    return out;
}

GlobalBasis fit_global_basis(const Eigen::MatrixXd& local_projected, double variance_threshold)
{
    check_threshold(variance_threshold);
    if (local_projected.cols() < 1)
        throw DataError("no local features to build a global basis from");
    GlobalBasis g;
    g.centering = local_projected.colwise().mean().transpose();
    Eigen::MatrixXd centered = local_projected.rowwise() - g.centering.transpose();
    Truncated t = truncated_svd(centered, variance_threshold);
    g.eigvecs = std::move(t.v);
    g.singular_values = std::move(t.sv);
    g.pc = t.k;
    g.variance_kept = t.kept;
    return g;
}

CompositeBasis fit_composite_basis(const Eigen::MatrixXd& alpha_stack, const MaskedParcellation& parcellation,
                                   double local_threshold, double global_threshold, unsigned threads)
{
    CompositeBasis basis;
    basis.n_voxels = alpha_stack.cols();
    basis.local_threshold = local_threshold;
    basis.global_threshold = global_threshold;
    basis.local = fit_local_bases(alpha_stack, parcellation, local_threshold, threads);
    basis.global = fit_global_basis(project_local(alpha_stack, basis.local), global_threshold);
    log::info("composite basis: " + std::to_string(basis.n_voxels) + " voxels -> " +
              std::to_string(basis.n_local_features()) + " local features -> " +
              std::to_string(basis.n_components()) + " components");
    return basis;
}

Eigen::MatrixXd project(const Eigen::MatrixXd& alpha_stack, const CompositeBasis& basis)
{
    if (alpha_stack.cols() != basis.n_voxels)
        throw DataError("projection input has " + std::to_string(alpha_stack.cols()) + " voxels, basis expects " +
                        std::to_string(basis.n_voxels));
    Eigen::MatrixXd local = project_local(alpha_stack, basis.local);
    local.rowwise() -= basis.global.centering.transpose();
    return local * basis.global.eigvecs;
}

Eigen::MatrixXd backproject(const Eigen::MatrixXd& coef, const CompositeBasis& basis,
                            const std::vector<Eigen::Index>& add_centering_rows)
{
    if (coef.cols() != basis.n_components())
        throw DataError("coefficient matrix has " + std::to_string(coef.cols()) + " columns, basis has " +
                        std::to_string(basis.n_components()) + " components");
    for (Eigen::Index r : add_centering_rows)
        if (r < 0 || r >= coef.rows())
            throw UsageError("centering row out of range");

    Eigen::MatrixXd features = coef * basis.global.eigvecs.transpose();
    for (Eigen::Index r : add_centering_rows)
        features.row(r) += basis.global.centering.transpose();

    Eigen::MatrixXd out(coef.rows(), basis.n_voxels);
    Eigen::Index off = 0;
    for (const auto& b : basis.local) {
        Eigen::MatrixXd block = features.middleCols(off, b.k) * b.eigvecs.transpose();
        for (Eigen::Index r : add_centering_rows)
            block.row(r) += b.centering.transpose();
        for (std::size_t j = 0; j < b.voxels.size(); ++j)
            out.col(b.voxels[j]) = block.col(static_cast<Eigen::Index>(j));
        off += b.k;
    }
    return out;
}

Eigen::MatrixXd composite_matrix(const CompositeBasis& basis)
{
    Eigen::MatrixXd identity = Eigen::MatrixXd::Identity(basis.n_components(), basis.n_components());
    return backproject(identity, basis).transpose();
}

void save_basis(const fs::path& dir, const CompositeBasis& basis)
{
    fs::create_directories(dir);
    std::ostringstream m;
    m << "longmem-basis 1\n";
    m << "n_voxels " << basis.n_voxels << "\n";
    m << "local_threshold " << fmt(basis.local_threshold) << "\n";
    m << "global_threshold " << fmt(basis.global_threshold) << "\n";
    m << "n_rois " << basis.local.size() << "\n";
    for (const auto& b : basis.local) {
        const std::string stem = roi_stem(b.roi_id);
        write_matrix(dir / (stem + ".bin"), b.eigvecs);
        write_index(dir / (stem + ".idx"), b.voxels);
        write_matrix(dir / (stem + "_sv.bin"), b.singular_values);
        m << "roi " << b.roi_id << ' ' << b.n_voxels() << ' ' << b.k << ' ' << fmt(b.variance_kept) << "\n";
        m << "center";
        for (Eigen::Index i = 0; i < b.centering.size(); ++i)
            m << ' ' << fmt(b.centering[i]);
        m << "\n";
    }
    write_matrix(dir / "global.bin", basis.global.eigvecs);
    write_matrix(dir / "global_sv.bin", basis.global.singular_values);
    m << "global " << basis.global.pc << ' ' << basis.global.eigvecs.rows() << ' ' << fmt(basis.global.variance_kept)
      << "\n";
    m << "global_center";
    for (Eigen::Index i = 0; i < basis.global.centering.size(); ++i)
        m << ' ' << fmt(basis.global.centering[i]);
    m << "\n";

    {
        std::ofstream out(dir / kManifest, std::ios::binary | std::ios::trunc);
        out << m.str();
    }
    const std::string hash = basis_content_hash(dir);
    std::ofstream out(dir / kManifest, std::ios::binary | std::ios::app);
    out << kHashKey << ' ' << hash << "\n";
    if (!out)
        throw DataError("cannot write basis manifest in " + dir.string());
}

std::string basis_content_hash(const fs::path& dir)
{
    std::vector<fs::path> members;
    const std::string body = manifest_body(dir, &members);
    Sha256 h;
    h.update(body);
    for (const auto& p : members)
        h.update_file(p);
    return h.hex();
}

CompositeBasis load_basis(const fs::path& dir)
{
    std::ifstream in(dir / kManifest);
    if (!in)
        throw DataError("basis archive has no manifest: " + dir.string());

    CompositeBasis basis;
    std::string line, recorded_hash;
    bool header = false;
    std::size_t n_rois = 0;
    auto read_vector = [](std::istringstream& ls) {
        std::vector<double> v;
        std::string tok;
        while (ls >> tok)
            v.push_back(parse_double(tok));
        return Eigen::VectorXd(Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
    };
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "longmem-basis") {
            int version = 0;
            ls >> version;
            if (version != 1)
                throw DataError("unsupported basis archive version");
            header = true;
        } else if (key == "n_voxels") {
            ls >> basis.n_voxels;
        } else if (key == "local_threshold") {
            std::string tok;
            ls >> tok;
            basis.local_threshold = parse_double(tok);
        } else if (key == "global_threshold") {
            std::string tok;
            ls >> tok;
            basis.global_threshold = parse_double(tok);
        } else if (key == "n_rois") {
            ls >> n_rois;
        } else if (key == "roi") {
            LocalBasis b;
            std::int64_t nv = 0;
            std::string kept;
            ls >> b.roi_id >> nv >> b.k >> kept;
            b.variance_kept = parse_double(kept);
            const std::string stem = roi_stem(b.roi_id);
            b.eigvecs = read_matrix(dir / (stem + ".bin"));
            b.voxels = read_index(dir / (stem + ".idx"));
            b.singular_values = read_matrix(dir / (stem + "_sv.bin"));
            if (b.n_voxels() != nv || b.eigvecs.rows() != nv || b.eigvecs.cols() != b.k)
                throw DataError("basis archive: ROI " + std::to_string(b.roi_id) + " has inconsistent shapes");
            basis.local.push_back(std::move(b));
        } else if (key == "center") {
            if (basis.local.empty())
                throw DataError("basis manifest: centering before any ROI");
            basis.local.back().centering = read_vector(ls);
            if (basis.local.back().centering.size() != basis.local.back().n_voxels())
                throw DataError("basis manifest: centering length mismatch");
        } else if (key == "global") {
            Eigen::Index nf = 0;
            std::string kept;
            ls >> basis.global.pc >> nf >> kept;
            basis.global.variance_kept = parse_double(kept);
            basis.global.eigvecs = read_matrix(dir / "global.bin");
            basis.global.singular_values = read_matrix(dir / "global_sv.bin");
            if (basis.global.eigvecs.rows() != nf || basis.global.eigvecs.cols() != basis.global.pc)
                throw DataError("basis archive: global basis has inconsistent shape");
        } else if (key == "global_center") {
            basis.global.centering = read_vector(ls);
        } else if (key == kHashKey) {
            ls >> recorded_hash;
        } else if (!key.empty()) {
            throw DataError("basis manifest: unknown entry '" + key + "'");
        }
    }
    if (!header)
        throw DataError("not a basis archive: " + dir.string());
    if (recorded_hash.empty() || recorded_hash != basis_content_hash(dir))
        throw DataError("basis archive integrity check failed: " + dir.string());
    if (basis.local.size() != n_rois)
        throw DataError("basis archive: expected " + std::to_string(n_rois) + " ROI bases, found " +
                        std::to_string(basis.local.size()));
    if (basis.global.eigvecs.rows() != basis.n_local_features() ||
        basis.global.centering.size() != basis.n_local_features())
        throw DataError("basis archive: global basis does not match local feature count");
    return basis;
}

} // namespace longmem
