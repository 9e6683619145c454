#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "uemb/error.hpp"
#include "uemb/tensor.hpp"

namespace uemb {

/// Embedding rows labelled by unique string ids.
class EmbeddingSet {
 public:
  EmbeddingSet() = default;
  EmbeddingSet(std::vector<std::string> ids, DenseMatrix matrix)
      : ids_(std::move(ids)), matrix_(std::move(matrix)) {
    if (ids_.size() != matrix_.rows()) {
      throw DimensionError("embedding set: " + std::to_string(ids_.size()) + " ids for " +
                           std::to_string(matrix_.rows()) + " rows");
    }
    index_.reserve(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      if (!index_.emplace(ids_[i], i).second) {
        throw ValidationError("embedding set: duplicate id '" + ids_[i] + "'");
      }
    }
  }

  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const DenseMatrix& matrix() const noexcept { return matrix_; }
  std::size_t size() const noexcept { return ids_.size(); }
  std::size_t dim() const noexcept { return matrix_.cols(); }

  std::optional<std::size_t> find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t at(const std::string& id) const {
    auto r = find(id);
    if (!r) throw ValidationError("embedding set: unknown id '" + id + "'");
    return *r;
  }

 private:
  std::vector<std::string> ids_;
  DenseMatrix matrix_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace uemb
