#include "clm/pca.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <stdexcept>

#include "clm/csv.hpp"

namespace clm {

namespace {

std::vector<double> block_of(const EncoderParameters& p) {
  const auto f = p.flatten(p.layout().final_block());
  return {f.begin(), f.end()};
}

}  // namespace

std::vector<BlockVector> collect_block_vectors(std::span<const Checkpoint> checkpoints,
                                               std::span<const FinetunedModel> finetuned,
                                               std::span<const std::string> checkpoint_ids) {
  if (!checkpoint_ids.empty() && checkpoint_ids.size() != checkpoints.size()) {
    throw std::invalid_argument("collect_block_vectors: one id per checkpoint");
  }
  const ModelConfig* config = nullptr;
  auto check = [&](const EncoderParameters& p, const std::string& id) {
    if (!config) config = &p.config;
    else if (!(p.config == *config)) throw std::invalid_argument("model " + id + " has a different config");
  };
  std::vector<BlockVector> out;
  std::map<std::string, double> fractions;
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    const auto& c = checkpoints[i];
    const std::string id =
        checkpoint_ids.empty() ? c.meta.run_id + "/" + std::to_string(c.meta.step) : checkpoint_ids[i];
    check(c.params, id);
    fractions[id] = c.meta.epoch_fraction;
    out.push_back({{id, Provenance::Kind::checkpoint, "", id, c.meta.epoch_fraction}, block_of(c.params)});
  }
  for (const auto& f : finetuned) {
    check(f.params, f.id);
    auto it = fractions.find(f.init_checkpoint_id);
    if (it == fractions.end()) {
      throw std::invalid_argument("finetuned model " + f.id + " starts from unknown checkpoint " + f.init_checkpoint_id);
    }
    out.push_back({{f.id, Provenance::Kind::finetuned, f.task, f.init_checkpoint_id, it->second}, block_of(f.params)});
  }
  return out;
}

Projection pca_project(std::span<const std::vector<double>> rows, std::size_t k) {
  const std::size_t n = rows.size();
  if (k == 0) throw std::invalid_argument("pca_project: k must be positive");
  if (n < k + 1) throw std::invalid_argument("pca_project needs at least k + 1 vectors");
  const std::size_t dim = rows[0].size();
  for (const auto& r : rows) {
    if (r.size() != dim) throw std::invalid_argument("pca_project: vectors differ in dimension");
  }
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  RowMat X(n, dim);
  for (std::size_t i = 0; i < n; ++i) X.row(i) = Eigen::Map<const Eigen::RowVectorXd>(rows[i].data(), dim);
  const Eigen::RowVectorXd mean = X.colwise().mean();
  X.rowwise() -= mean;

  const Eigen::MatrixXd G = X * X.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(G);
  if (eig.info() != Eigen::Success) throw std::runtime_error("pca_project: eigensolver failed");
  // Eigen sorts ascending.
  const Eigen::VectorXd lambda = eig.eigenvalues().reverse();
  const Eigen::MatrixXd U = eig.eigenvectors().rowwise().reverse();
  const double total = lambda.cwiseMax(0.0).sum();
  const double tol = 1e-12 * std::max(1.0, lambda(0)) * static_cast<double>(n);
  if (!(lambda(static_cast<Eigen::Index>(k - 1)) > tol)) {
    throw std::invalid_argument("pca_project: k = " + std::to_string(k) + " exceeds the rank of the data");
  }

  Projection p;
  p.mean.assign(mean.data(), mean.data() + dim);
  p.coords.assign(n, std::vector<double>(k));
  for (std::size_t j = 0; j < k; ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    Eigen::VectorXd dir = X.transpose() * U.col(jj);
    dir /= dir.norm();
    Eigen::Index arg = 0;
    dir.cwiseAbs().maxCoeff(&arg);
    if (dir(arg) < 0) dir = -dir;
    const Eigen::VectorXd c = X * dir;
    for (std::size_t i = 0; i < n; ++i) p.coords[i][j] = c(static_cast<Eigen::Index>(i));
    p.directions.emplace_back(dir.data(), dir.data() + dim);
    p.explained.push_back(lambda(jj) / total);
  }
  return p;
}

std::vector<std::array<double, 2>> relative_coords(const Projection& projection, std::span<const BlockVector> items) {
  if (projection.coords.size() != items.size()) throw std::invalid_argument("relative_coords: item count mismatch");
  if (!projection.coords.empty() && projection.coords[0].size() < 2) {
    throw std::invalid_argument("relative_coords needs a 2-D projection");
  }
  std::map<std::string, std::size_t> ckpt;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].provenance.kind == Provenance::Kind::checkpoint) ckpt[items[i].provenance.id] = i;
  }
  std::vector<std::array<double, 2>> out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& pv = items[i].provenance;
    if (pv.kind == Provenance::Kind::checkpoint) {
      out.push_back({0.0, 0.0});
      continue;
    }
    auto it = ckpt.find(pv.init_id);
    if (it == ckpt.end()) throw std::invalid_argument("item " + pv.id + ": initialization " + pv.init_id + " missing");
    const auto& c = projection.coords[i];
    const auto& o = projection.coords[it->second];
    out.push_back({c[0] - o[0], c[1] - o[1]});
  }
  return out;
}

std::vector<Displacement> displacement_norms(std::span<const std::array<double, 2>> relative,
                                             std::span<const BlockVector> items) {
  if (relative.size() != items.size()) throw std::invalid_argument("displacement_norms: item count mismatch");
  std::vector<Displacement> out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& pv = items[i].provenance;
    if (pv.kind != Provenance::Kind::finetuned) continue;
    out.push_back({pv.id, pv.task, pv.init_epoch_fraction, std::hypot(relative[i][0], relative[i][1])});
  }
  return out;
}

std::string projection_csv(std::span<const BlockVector> items, const Projection& projection,
                           std::span<const std::array<double, 2>> relative) {
  CsvWriter w({"item_id", "kind", "task", "init_epoch_fraction", "pc1", "pc2", "rel_pc1", "rel_pc2", "displacement"});
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& pv = items[i].provenance;
    const bool ft = pv.kind == Provenance::Kind::finetuned;
    w.add({pv.id, ft ? "finetuned" : "checkpoint", pv.task, format_number(pv.init_epoch_fraction),
           format_number(projection.coords[i][0]), format_number(projection.coords[i][1]),
           format_number(relative[i][0]), format_number(relative[i][1]),
           format_number(std::hypot(relative[i][0], relative[i][1]))});
  }
  return w.str();
}

}  // namespace clm
