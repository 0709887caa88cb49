#pragma once

#include <cstdio>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pivotgen/mesh.hpp"

namespace pivotgen {

namespace detail {

inline std::vector<std::string> split_ws(const std::string& line) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
        std::size_t j = i;
        while (j < line.size() && line[j] != ' ' && line[j] != '\t') ++j;
        if (j > i) out.push_back(line.substr(i, j - i));
        i = j;
    }
    return out;
}

inline bool parse_double(const std::string& tok, double& out) {
    const char* begin = tok.c_str();
    char* end = nullptr;
    out = std::strtod(begin, &end);
    return end != begin && *end == '\0';
}

}  // namespace detail

// ASCII Wavefront OBJ reader. Supports `v` and `f` records, `v/vt/vn` slash
// syntax and negative (relative) indices; everything else is ignored.
// Polygons are preserved; call triangulate() afterwards.
inline RawMesh parse_obj(std::string_view text) {
    RawMesh mesh;
    int lineno = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t eol = text.find('\n', pos);
        std::string line(text.substr(pos, eol == std::string_view::npos ? text.size() - pos : eol - pos));
        pos = eol == std::string_view::npos ? text.size() + 1 : eol + 1;
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        auto toks = detail::split_ws(line);
        if (toks.empty() || toks[0][0] == '#') continue;

        if (toks[0] == "v") {
            if (toks.size() < 4) throw ParseError(lineno, "vertex needs 3 coordinates");
            Vec3 v;
            for (int a = 0; a < 3; ++a) {
                if (!detail::parse_double(toks[a + 1], v[a]))
                    throw ParseError(lineno, "malformed coordinate '" + toks[a + 1] + "'");
            }
            mesh.vertices.push_back(v);
        } else if (toks[0] == "f") {
            if (toks.size() < 4) throw ParseError(lineno, "face with fewer than 3 vertices");
            std::vector<int> face;
            int nverts = static_cast<int>(mesh.vertices.size());
            for (std::size_t t = 1; t < toks.size(); ++t) {
                // Only the leading vertex index matters; /vt and /vn are dropped.
                std::string head = toks[t].substr(0, toks[t].find('/'));
                char* end = nullptr;
                long idx = std::strtol(head.c_str(), &end, 10);
                if (end == head.c_str() || *end != '\0' || idx == 0)
                    throw ParseError(lineno, "malformed face index '" + toks[t] + "'");
                long resolved = idx > 0 ? idx - 1 : nverts + idx;
                if (resolved < 0 || resolved >= nverts)
                    throw ParseError(lineno, "face index out of range");
                face.push_back(static_cast<int>(resolved));
            }
            for (std::size_t a = 0; a < face.size(); ++a)
                for (std::size_t b = a + 1; b < face.size(); ++b)
                    if (face[a] == face[b])
                        throw ParseError(lineno, "face references the same vertex twice");
            mesh.faces.push_back(std::move(face));
        }
        // vt/vn/o/g/s/usemtl/mtllib and friends: ignored.
    }
    return mesh;
}

// Dequantized vertices with 9 decimal digits, 1-based faces. Re-quantizing a
// parse of this output reproduces the mesh exactly.
inline std::string write_obj(const QuantizedMesh& mesh) {
    validate(mesh);
    std::string out;
    out.reserve(mesh.vertices.size() * 40 + mesh.faces.size() * 16);
    char buf[80];
    for (const auto& p : mesh.vertices) {
        Vec3 v = dequantize_point(p);
        std::snprintf(buf, sizeof(buf), "v %.9f %.9f %.9f\n", v[0], v[1], v[2]);
        out += buf;
    }
    for (const auto& f : mesh.faces) {
        std::snprintf(buf, sizeof(buf), "f %d %d %d\n", f[0] + 1, f[1] + 1, f[2] + 1);
        out += buf;
    }
    return out;
}

}  // namespace pivotgen
