#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "clm/checkpoint.hpp"

namespace clm {

struct Provenance {
  enum class Kind { checkpoint, finetuned };
  std::string id;
  Kind kind = Kind::checkpoint;
  std::string task;      // finetuned only
  std::string init_id;   // checkpoint the item starts from (itself for checkpoints)
  double init_epoch_fraction = 0.0;
};

struct BlockVector {
  Provenance provenance;
  std::vector<double> values;
};

struct FinetunedModel {
  std::string id;
  std::string task;
  std::string init_checkpoint_id;
  EncoderParameters params;
};

// Final encoder block of every model, checkpoints first. Checkpoint ids are
// their run_id/step pair unless `checkpoint_ids` is given.
std::vector<BlockVector> collect_block_vectors(std::span<const Checkpoint> checkpoints,
                                               std::span<const FinetunedModel> finetuned,
                                               std::span<const std::string> checkpoint_ids = {});

struct Projection {
  std::vector<double> mean;
  std::vector<std::vector<double>> directions;  // k unit vectors
  std::vector<std::vector<double>> coords;      // n rows of k
  std::vector<double> explained;                // variance fraction per direction
};

// PCA through the eigendecomposition of the n x n Gram matrix of centered
// rows. Each direction's largest-magnitude entry is made positive.
Projection pca_project(std::span<const std::vector<double>> rows, std::size_t k = 2);

// Coordinates minus those of the item's initialization checkpoint.
std::vector<std::array<double, 2>> relative_coords(const Projection& projection, std::span<const BlockVector> items);

struct Displacement {
  std::string item_id;
  std::string task;
  double init_epoch_fraction = 0.0;
  double norm = 0.0;
};

// One entry per finetuned item.
std::vector<Displacement> displacement_norms(std::span<const std::array<double, 2>> relative,
                                             std::span<const BlockVector> items);

// item_id,kind,task,init_epoch_fraction,pc1,pc2,rel_pc1,rel_pc2,displacement
std::string projection_csv(std::span<const BlockVector> items, const Projection& projection,
                           std::span<const std::array<double, 2>> relative);

}  // namespace clm
