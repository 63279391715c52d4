// SPDX-License-Identifier: Apache-2.0
//
// Named-tensor checkpoint format, shared by the backbone, the tuner states
// ("tuner/..." names) and the bypass ("bypass/..." names). Plain UTF-8 text:
//
//   restune.tensors.v1
//   <count>
//   <name> <ndim> <dims...> <values...>
//
// Values are printed with 17 significant digits, which round-trips IEEE
// doubles exactly, so serialization is byte-stable and hashable.

#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "restune/tensor.hpp"

namespace restune {

using NamedTensors = std::vector<std::pair<std::string, TensorPtr>>;

inline std::string serialize_tensors(const NamedTensors& tensors) {
    std::ostringstream os;
    os << "restune.tensors.v1\n" << tensors.size() << "\n";
    char buf[32];
    for (const auto& [name, t] : tensors) {
        os << name << ' ' << t->ndim();
        for (auto d : t->shape) os << ' ' << d;
        for (double v : t->data) {
            std::snprintf(buf, sizeof buf, "%.17g", v);
            os << ' ' << buf;
        }
        os << '\n';
    }
    return os.str();
}

inline NamedTensors parse_tensors(std::istream& in) {
    std::string magic;
    in >> magic;
    if (magic != "restune.tensors.v1")
        throw std::runtime_error("checkpoint: bad magic '" + magic + "'");
    std::size_t count = 0;
    in >> count;
    NamedTensors out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::string name;
        std::size_t ndim = 0;
        if (!(in >> name >> ndim)) throw std::runtime_error("checkpoint: truncated at tensor " + std::to_string(i));
        Shape shape(ndim);
        for (auto& d : shape) in >> d;
        auto t = make_tensor(shape);
        for (auto& v : t->data) in >> v;
        if (!in) throw std::runtime_error("checkpoint: truncated values in '" + name + "'");
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

inline void save_tensors(const std::string& path, const NamedTensors& tensors) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    f << serialize_tensors(tensors);
}

inline NamedTensors load_tensors(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    return parse_tensors(f);
}

/// Copy values from a parsed checkpoint into live tensors by name.
/// Every destination name must be present with a matching shape.
inline void restore_into(const NamedTensors& parsed, const NamedTensors& dest) {
    for (const auto& [name, target] : dest) {
        bool found = false;
        for (const auto& [src_name, src] : parsed) {
            if (src_name != name) continue;
            if (src->shape != target->shape)
                throw std::runtime_error("checkpoint: shape mismatch for '" + name + "': " +
                                         shape_str(src->shape) + " vs " + shape_str(target->shape));
            target->data = src->data;
            found = true;
            break;
        }
        if (!found) throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
    }
}

/// FNV-1a 64-bit; stable across runs, used to show checkpoints stay
/// byte-identical through tuning.
inline std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

} // namespace restune
