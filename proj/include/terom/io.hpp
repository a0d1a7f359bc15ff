#pragma once

#include "terom/types.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace terom::io {

using nlohmann::json;

/// One named float64 array inside a container file. `data` is stored
/// row-major in file order; `shape` may have one or two entries.
struct NamedArray {
    std::string name;
    std::vector<Index> shape;
    Vector data;

    Index rows() const { return shape.empty() ? 0 : shape[0]; }
    Index cols() const { return shape.size() > 1 ? shape[1] : 1; }

    /// View the flat data as a row-major matrix copy.
    Matrix as_matrix() const;
};

NamedArray make_array(std::string name, const Vector& v);
NamedArray make_array(std::string name, const Matrix& m);

/// Binary container: magic "TEB1", little-endian u64 header length, JSON
/// header {"endian","meta","arrays":[{"name","shape"}...]}, then the arrays
/// back to back as little-endian float64.
void write_container(const std::filesystem::path& path, const json& meta,
                     const std::vector<NamedArray>& arrays);

struct Container {
    json meta;
    std::vector<NamedArray> arrays;

    const NamedArray& get(const std::string& name) const;
    bool has(const std::string& name) const;
};

Container read_container(const std::filesystem::path& path);

/// Minimal CSV writer: one header row, then numeric rows.
void write_csv(const std::filesystem::path& path,
               const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

void write_json(const std::filesystem::path& path, const json& j);
json read_json(const std::filesystem::path& path);

} // namespace terom::io
