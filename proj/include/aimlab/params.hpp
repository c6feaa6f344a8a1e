#pragma once

#include <string>
#include <utility>
#include <vector>

#include "aimlab/tensor.hpp"

namespace aimlab {

// Ordered name -> tensor view over a model's parameters. Iteration order is
// insertion order, which keeps optimizer and checkpoint traversals
// deterministic.
struct ParamMap {
    std::vector<std::pair<std::string, Tensor>> items;

    void add(const std::string& name, const Tensor& t);
    const Tensor* find(const std::string& name) const;
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const { return find(name) != nullptr; }

    std::vector<std::string> names() const;
    std::vector<Tensor> tensors(const std::vector<std::string>& names) const;
    std::size_t scalar_count() const;
};

} // namespace aimlab
