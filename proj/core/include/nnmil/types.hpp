#pragma once

#include <string>
#include <string_view>

#include <Eigen/Core>

namespace nnmil {

template <typename T>
using MatrixX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using VectorX = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// Patch embeddings as stored on disk: N rows of D float32 values.
using EmbeddingMatrix = MatrixX<float>;

enum class Task { classification, regression, survival };

std::string_view to_string(Task task);
Task parse_task(std::string_view text);

enum class Split { train, val, test };

std::string_view to_string(Split split);
Split parse_split(std::string_view text);

enum class TrainingMode { nnmil, full_bag_batch1 };

std::string_view to_string(TrainingMode mode);
TrainingMode parse_training_mode(std::string_view text);

}  // namespace nnmil
