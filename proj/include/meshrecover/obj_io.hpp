// ASCII OBJ reader/writer. Only the subset needed here: v, vt and triangular
// f records. Faces may reference texture coordinates (v/vt); when they do,
// each vertex must pair with exactly one vt index so UVs are per-vertex.
#pragma once

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "geometry.hpp"

namespace meshrecover {

struct ObjMesh {
    std::vector<Vec3> vertices;
    std::vector<Vec2> uvs;                       // empty when the file has no vt records
    std::vector<std::array<int, 3>> triangles;   // zero-based vertex indices
    std::vector<std::array<int, 3>> tri_uvs;     // zero-based vt indices, parallel to triangles
};

namespace detail {

// Parses "i", "i/j" or "i/j/k"; returns vertex and optional vt index (1-based).
inline void parse_face_corner(const std::string& tok, const std::string& origin, long& v, long& vt) {
    v = 0;
    vt = 0;
    const std::size_t s1 = tok.find('/');
    try {
        if (s1 == std::string::npos) {
            v = std::stol(tok);
            return;
        }
        v = std::stol(tok.substr(0, s1));
        const std::size_t s2 = tok.find('/', s1 + 1);
        const std::string mid =
            s2 == std::string::npos ? tok.substr(s1 + 1) : tok.substr(s1 + 1, s2 - s1 - 1);
        if (!mid.empty()) vt = std::stol(mid);
    } catch (const std::exception&) {
        throw FormatError(origin + ": malformed face corner \"" + tok + "\"");
    }
}

}  // namespace detail

inline ObjMesh read_obj(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw FormatError(path + ": cannot open file");
    ObjMesh mesh;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        std::istringstream ss(line);
        std::string tag;
        if (!(ss >> tag) || tag.empty() || tag[0] == '#') continue;
        const std::string origin = path + ":" + std::to_string(lineno);
        if (tag == "v") {
            Vec3 v;
            if (!(ss >> v.x >> v.y >> v.z)) throw FormatError(origin + ": malformed vertex record");
            mesh.vertices.push_back(v);
        } else if (tag == "vt") {
            Vec2 t;
            if (!(ss >> t.x >> t.y)) throw FormatError(origin + ": malformed vt record");
            mesh.uvs.push_back(t);
        } else if (tag == "f") {
            std::vector<long> vs, vts;
            std::string tok;
            while (ss >> tok) {
                long v = 0, vt = 0;
                detail::parse_face_corner(tok, origin, v, vt);
                vs.push_back(v);
                vts.push_back(vt);
            }
            if (vs.size() != 3) throw FormatError(origin + ": only triangular faces are supported");
            std::array<int, 3> tri{}, triuv{};
            for (int c = 0; c < 3; ++c) {
                const long v = vs[static_cast<std::size_t>(c)];
                const long vt = vts[static_cast<std::size_t>(c)];
                if (v < 1 || static_cast<std::size_t>(v) > mesh.vertices.size())
                    throw FormatError(origin + ": vertex index " + std::to_string(v) +
                                      " out of bounds (have " + std::to_string(mesh.vertices.size()) +
                                      " vertices)");
                tri[static_cast<std::size_t>(c)] = static_cast<int>(v - 1);
                if (vt != 0) {
                    if (vt < 1 || static_cast<std::size_t>(vt) > mesh.uvs.size())
                        throw FormatError(origin + ": vt index " + std::to_string(vt) + " out of bounds");
                    triuv[static_cast<std::size_t>(c)] = static_cast<int>(vt - 1);
                } else {
                    triuv[static_cast<std::size_t>(c)] = -1;
                }
            }
            mesh.triangles.push_back(tri);
            mesh.tri_uvs.push_back(triuv);
        }
        // Other record types (vn, o, g, usemtl, ...) are ignored.
    }
    return mesh;
}

inline void write_obj(const std::string& path, const std::vector<Vec3>& vertices,
                      const std::vector<std::array<int, 3>>& triangles,
                      const std::vector<Vec2>* uvs = nullptr) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw FormatError(path + ": cannot open file for writing");
    char buf[160];
    for (const Vec3& v : vertices) {
        std::snprintf(buf, sizeof(buf), "v %.17g %.17g %.17g\n", v.x, v.y, v.z);
        f << buf;
    }
    if (uvs) {
        for (const Vec2& t : *uvs) {
            std::snprintf(buf, sizeof(buf), "vt %.17g %.17g\n", t.x, t.y);
            f << buf;
        }
    }
    for (const auto& t : triangles) {
        if (uvs)
            std::snprintf(buf, sizeof(buf), "f %d/%d %d/%d %d/%d\n", t[0] + 1, t[0] + 1, t[1] + 1,
                          t[1] + 1, t[2] + 1, t[2] + 1);
        else
            std::snprintf(buf, sizeof(buf), "f %d %d %d\n", t[0] + 1, t[1] + 1, t[2] + 1);
        f << buf;
    }
    if (!f) throw FormatError(path + ": short write");
}

}  // namespace meshrecover
