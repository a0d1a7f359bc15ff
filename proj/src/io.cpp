#include "terom/io.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace terom::io {

namespace {

constexpr char kMagic[4] = {'T', 'E', 'B', '1'};

Index shape_size(const std::vector<Index>& shape) {
    Index n = 1;
    for (Index s : shape) n *= s;
    return shape.empty() ? 0 : n;
}

} // namespace

Matrix NamedArray::as_matrix() const {
    const Index r = rows();
    const Index c = cols();
    Matrix m(r, c);
    for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < c; ++j) m(i, j) = data[i * c + j];
    return m;
}

NamedArray make_array(std::string name, const Vector& v) {
    NamedArray a;
    a.name = std::move(name);
    a.shape = {v.size()};
    a.data = v;
    return a;
}

NamedArray make_array(std::string name, const Matrix& m) {
    NamedArray a;
    a.name = std::move(name);
    a.shape = {m.rows(), m.cols()};
    a.data.resize(m.size());
    for (Index i = 0; i < m.rows(); ++i)
        for (Index j = 0; j < m.cols(); ++j) a.data[i * m.cols() + j] = m(i, j);
    return a;
}

void write_container(const std::filesystem::path& path, const json& meta,
                     const std::vector<NamedArray>& arrays) {
    json header;
    header["endian"] = "little";
    header["meta"] = meta;
    header["arrays"] = json::array();
    for (const auto& a : arrays) {
        json entry;
        entry["name"] = a.name;
        entry["shape"] = a.shape;
        header["arrays"].push_back(entry);
        if (a.data.size() != shape_size(a.shape))
            throw DataError("array '" + a.name + "' data does not match its shape");
    }
    const std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path.string());
    out.write(kMagic, 4);
    const std::uint64_t len = header_str.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& a : arrays) {
        out.write(reinterpret_cast<const char*>(a.data.data()),
                  static_cast<std::streamsize>(sizeof(double) * a.data.size()));
    }
    if (!out) throw DataError("write failed: " + path.string());
}

const NamedArray& Container::get(const std::string& name) const {
    for (const auto& a : arrays)
        if (a.name == name) return a;
    throw DataError("container has no array '" + name + "'");
}

bool Container::has(const std::string& name) const {
    for (const auto& a : arrays)
        if (a.name == name) return true;
    return false;
}

Container read_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw DataError("not a container file: " + path.string());
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string header_str(len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(len));
    if (!in) throw DataError("truncated header: " + path.string());

    json header = json::parse(header_str);
    if (header.value("endian", "") != "little")
        throw DataError("unsupported endianness tag in " + path.string());

    Container c;
    c.meta = header["meta"];
    for (const auto& entry : header["arrays"]) {
        NamedArray a;
        a.name = entry["name"].get<std::string>();
        a.shape = entry["shape"].get<std::vector<Index>>();
        a.data.resize(shape_size(a.shape));
        in.read(reinterpret_cast<char*>(a.data.data()),
                static_cast<std::streamsize>(sizeof(double) * a.data.size()));
        if (!in) throw DataError("truncated array '" + a.name + "' in " + path.string());
        c.arrays.push_back(std::move(a));
    }
    return c;
}

void write_csv(const std::filesystem::path& path,
               const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path.string());
    for (std::size_t i = 0; i < header.size(); ++i)
        out << header[i] << (i + 1 < header.size() ? "," : "\n");
    out.precision(17);
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i)
            out << row[i] << (i + 1 < row.size() ? "," : "\n");
    }
    if (!out) throw DataError("write failed: " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path.string());
    out << text;
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_json(const std::filesystem::path& path, const json& j) {
    write_text(path, j.dump(2) + "\n");
}

json read_json(const std::filesystem::path& path) {
    return json::parse(read_text(path));
}

} // namespace terom::io
