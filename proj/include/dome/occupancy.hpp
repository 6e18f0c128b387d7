#ifndef DOME_OCCUPANCY_HPP
#define DOME_OCCUPANCY_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dome/geometry.hpp"
#include "dome/io.hpp"
#include "dome/ops.hpp"
#include "dome/tensor.hpp"

namespace dome {

struct SemanticClassTable {
    int num_classes = 0;
    int empty_id = 0;
    std::vector<std::string> names;
    std::set<int> dynamic_class_ids;
    std::set<int> road_class_ids;

    void validate() const {
        if (num_classes < 2)
            throw std::invalid_argument("class table: need at least 2 classes");
        if (empty_id < 0 || empty_id >= num_classes)
            throw std::invalid_argument("class table: empty id out of range");
        if (static_cast<int>(names.size()) != num_classes)
            throw std::invalid_argument("class table: name count mismatch");
        for (int d : dynamic_class_ids)
            if (road_class_ids.count(d))
                throw std::invalid_argument(
                    str("class table: class ", d, " is both dynamic and road"));
    }
};

// 6-class table for the synthetic desk-scale scenes.
inline SemanticClassTable synthetic_class_table() {
    SemanticClassTable t;
    t.num_classes = 6;
    t.empty_id = 0;
    t.names = {"empty", "road", "sidewalk", "car", "manmade", "vegetation"};
    t.dynamic_class_ids = {3};
    t.road_class_ids = {1};
    t.validate();
    return t;
}

// nuScenes-style 17 labeled classes + empty.
inline SemanticClassTable reference_class_table() {
    SemanticClassTable t;
    t.num_classes = 18;
    t.empty_id = 17;
    t.names = {"others", "barrier", "bicycle", "bus", "car", "construction_vehicle",
               "motorcycle", "pedestrian", "traffic_cone", "trailer", "truck",
               "driveable_surface", "other_flat", "sidewalk", "terrain", "manmade",
               "vegetation", "empty"};
    t.dynamic_class_ids = {2, 3, 4, 5, 6, 7, 9, 10};
    t.road_class_ids = {11};
    t.validate();
    return t;
}

// Geometry preset for constructing grids: dims, resolution, world range.
struct GridSpec {
    int h = 0, w = 0, d = 0;
    double resolution = 1.0;
    std::array<double, 3> origin = {0, 0, 0};
    int num_classes = 2;
};

// Dense semantic voxel grid. Labels are stored row-major with d fastest,
// then w, then h. dims/resolution/origin are fixed at construction.
class OccupancyGrid {
public:
    // Guards floor() against quotients that land an ulp below an exact
    // integer boundary (sub-nanometer at practical resolutions).
    static constexpr double kIndexSnap = 1e-9;

    OccupancyGrid() = default;

    explicit OccupancyGrid(const GridSpec& spec, uint8_t fill = 0)
        : OccupancyGrid(spec.h, spec.w, spec.d, spec.resolution, spec.origin,
                        spec.num_classes, fill) {}

    OccupancyGrid(int h, int w, int d, double resolution, std::array<double, 3> origin,
                  int num_classes, uint8_t fill = 0)
        : h_(h), w_(w), d_(d), resolution_(resolution), origin_(origin),
          num_classes_(num_classes) {
        if (h < 1 || w < 1 || d < 1)
            throw std::invalid_argument("occupancy grid: dims must be positive");
        if (resolution <= 0) throw std::invalid_argument("occupancy grid: resolution <= 0");
        if (num_classes < 2 || num_classes > 255)
            throw std::invalid_argument("occupancy grid: class count must be in [2,255]");
        if (fill >= num_classes)
            throw std::invalid_argument("occupancy grid: fill label out of range");
        labels_.assign(static_cast<size_t>(h) * w * d, fill);
    }

    int h() const { return h_; }
    int w() const { return w_; }
    int d() const { return d_; }
    double resolution() const { return resolution_; }
    const std::array<double, 3>& origin() const { return origin_; }
    int num_classes() const { return num_classes_; }

    size_t voxel_count() const { return labels_.size(); }
    const std::vector<uint8_t>& labels() const { return labels_; }

    size_t flat_index(int i, int j, int k) const {
        return (static_cast<size_t>(i) * w_ + j) * d_ + k;
    }

    uint8_t at(int i, int j, int k) const { return labels_[flat_index(i, j, k)]; }

    void set(int i, int j, int k, uint8_t label) {
        if (label >= num_classes_)
            throw std::invalid_argument(str("occupancy grid: label ", int(label),
                                            " out of range [0,", num_classes_, ")"));
        labels_[flat_index(i, j, k)] = label;
    }

    bool in_bounds(int i, int j, int k) const {
        return i >= 0 && i < h_ && j >= 0 && j < w_ && k >= 0 && k < d_;
    }

    // idx_k = floor((q_k - origin_k) / resolution); nullopt when outside.
    std::optional<std::array<int, 3>> voxel_index(const Vec3& q) const {
        std::array<int, 3> idx;
        for (int a = 0; a < 3; ++a) {
            double v = (q[a] - origin_[a]) / resolution_;
            idx[a] = static_cast<int>(std::floor(v + kIndexSnap));
        }
        if (!in_bounds(idx[0], idx[1], idx[2])) return std::nullopt;
        return idx;
    }

    Vec3 voxel_center(int i, int j, int k) const {
        return {origin_[0] + (i + 0.5) * resolution_,
                origin_[1] + (j + 0.5) * resolution_,
                origin_[2] + (k + 0.5) * resolution_};
    }

    bool same_geometry(const OccupancyGrid& o) const {
        return h_ == o.h_ && w_ == o.w_ && d_ == o.d_ && resolution_ == o.resolution_ &&
               origin_ == o.origin_ && num_classes_ == o.num_classes_;
    }

    bool operator==(const OccupancyGrid& o) const {
        return same_geometry(o) && labels_ == o.labels_;
    }

private:
    int h_ = 0, w_ = 0, d_ = 0;
    double resolution_ = 1.0;
    std::array<double, 3> origin_ = {0, 0, 0};
    int num_classes_ = 2;
    std::vector<uint8_t> labels_;

    friend OccupancyGrid read_grid_record(std::istream&, const std::string&);
};

// ---------------------------------------------------------------------------
// BEV flattening
// ---------------------------------------------------------------------------

// Looks up E_cls rows for every voxel and concatenates them along depth:
// output [H, W, D*C_emb], cell (h,w) = [E[label(h,w,0)], ..., E[label(h,w,D-1)]].
// Differentiable w.r.t. the embedding table.
template <typename R>
Tensor<R> flatten_bev(const OccupancyGrid& grid, Tensor<R> emb_table) {
    if (emb_table.rank() != 2)
        throw std::invalid_argument("flatten_bev: embedding table must be rank 2");
    if (emb_table.dim(0) != grid.num_classes())
        throw std::invalid_argument(str("flatten_bev: grid has ", grid.num_classes(),
                                        " classes but table has ", emb_table.dim(0), " rows"));
    int c_emb = emb_table.dim(1);
    std::vector<int> ids(grid.labels().begin(), grid.labels().end());
    auto looked = embedding_lookup(emb_table, ids, {grid.h(), grid.w(), grid.d()});
    return reshape(looked, {grid.h(), grid.w(), grid.d() * c_emb});
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MetricReport {
    std::map<int, double> iou_per_class;  // classes present in pred or gt, empty excluded
    double miou = 0.0;
    double iou_total = 0.0;
};

// Per-class IoU plus binary occupied-vs-empty IoU. Classes absent from both
// grids are excluded from the mean; the empty class never enters miou.
inline MetricReport compute_metrics(const OccupancyGrid& pred, const OccupancyGrid& gt,
                                    const SemanticClassTable& table) {
    if (pred.h() != gt.h() || pred.w() != gt.w() || pred.d() != gt.d())
        throw std::invalid_argument(str("compute_metrics: dims ", pred.h(), "x", pred.w(), "x",
                                        pred.d(), " vs ", gt.h(), "x", gt.w(), "x", gt.d()));
    int nc = table.num_classes;
    std::vector<size_t> inter(nc, 0), pred_n(nc, 0), gt_n(nc, 0);
    size_t occ_inter = 0, occ_union = 0;
    const auto& pl = pred.labels();
    const auto& gl = gt.labels();
    for (size_t v = 0; v < pl.size(); ++v) {
        int p = pl[v], g = gl[v];
        if (p < nc) ++pred_n[static_cast<size_t>(p)];
        if (g < nc) ++gt_n[static_cast<size_t>(g)];
        if (p == g && p < nc) ++inter[static_cast<size_t>(p)];
        bool po = p != table.empty_id, go = g != table.empty_id;
        if (po && go) ++occ_inter;
        if (po || go) ++occ_union;
    }
    MetricReport rep;
    double acc = 0.0;
    int counted = 0;
    for (int c = 0; c < nc; ++c) {
        if (c == table.empty_id) continue;
        size_t uni = pred_n[static_cast<size_t>(c)] + gt_n[static_cast<size_t>(c)] -
                     inter[static_cast<size_t>(c)];
        if (uni == 0) continue;  // absent from both
        double iou = static_cast<double>(inter[static_cast<size_t>(c)]) /
                     static_cast<double>(uni);
        rep.iou_per_class[c] = iou;
        acc += iou;
        ++counted;
    }
    rep.miou = counted ? acc / counted : 1.0;
    rep.iou_total = occ_union ? static_cast<double>(occ_inter) / static_cast<double>(occ_union)
                              : 1.0;
    return rep;
}

// ---------------------------------------------------------------------------
// OCCG / OCCS file formats
// ---------------------------------------------------------------------------

namespace detail {
constexpr uint16_t kOccFormatVersion = 1;
}

inline void write_grid_record(std::ostream& os, const OccupancyGrid& g) {
    os.write("OCCG", 4);
    write_u16(os, detail::kOccFormatVersion);
    write_u32(os, static_cast<uint32_t>(g.h()));
    write_u32(os, static_cast<uint32_t>(g.w()));
    write_u32(os, static_cast<uint32_t>(g.d()));
    write_f64(os, g.resolution());
    for (double o : g.origin()) write_f64(os, o);
    write_u16(os, static_cast<uint16_t>(g.num_classes()));
    os.write(reinterpret_cast<const char*>(g.labels().data()),
             static_cast<std::streamsize>(g.labels().size()));
}

inline OccupancyGrid read_grid_record(std::istream& is, const std::string& what) {
    expect_magic(is, "OCCG", 4, what);
    uint16_t ver = read_u16(is, "OCCG version");
    if (ver != detail::kOccFormatVersion)
        throw FormatError(FormatErrorCode::BadVersion,
                          str("OCCG version ", ver, ", expected ", detail::kOccFormatVersion));
    uint32_t h = read_u32(is, "OCCG H");
    uint32_t w = read_u32(is, "OCCG W");
    uint32_t d = read_u32(is, "OCCG D");
    double res = read_f64(is, "OCCG resolution");
    std::array<double, 3> origin;
    for (auto& o : origin) o = read_f64(is, "OCCG origin");
    uint16_t nc = read_u16(is, "OCCG class count");
    if (h < 1 || w < 1 || d < 1 || h > (1u << 20) || w > (1u << 20) || d > (1u << 20))
        throw FormatError(FormatErrorCode::Corrupt, str("OCCG dims ", h, "x", w, "x", d));
    if (res <= 0 || !std::isfinite(res))
        throw FormatError(FormatErrorCode::Corrupt, str("OCCG resolution ", res));
    if (nc < 2 || nc > 255)
        throw FormatError(FormatErrorCode::Corrupt, str("OCCG class count ", nc));
    OccupancyGrid g(static_cast<int>(h), static_cast<int>(w), static_cast<int>(d), res, origin,
                    nc);
    read_bytes(is, g.labels_.data(), g.labels_.size(), "OCCG labels");
    for (uint8_t l : g.labels_)
        if (l >= nc)
            throw FormatError(FormatErrorCode::LabelOutOfRange,
                              str("label ", int(l), " with ", nc, " classes"));
    return g;
}

inline void write_grid(const OccupancyGrid& g, const std::string& path) {
    auto os = open_out(path);
    write_grid_record(os, g);
    if (!os) throw FormatError(FormatErrorCode::OpenFailed, str("writing ", path));
}

inline OccupancyGrid read_grid(const std::string& path) {
    auto is = open_in(path);
    return read_grid_record(is, path);
}

// A sequence of frames with the ego pose per frame.
struct OccSequence {
    std::vector<OccupancyGrid> frames;
    std::vector<Pose> poses;

    size_t size() const { return frames.size(); }

    bool operator==(const OccSequence& o) const {
        return frames == o.frames && poses == o.poses;
    }
};

inline void write_sequence(const OccSequence& seq, const std::string& path) {
    if (seq.frames.size() != seq.poses.size())
        throw std::invalid_argument("write_sequence: frame/pose count mismatch");
    auto os = open_out(path);
    os.write("OCCS", 4);
    write_u16(os, detail::kOccFormatVersion);
    write_u32(os, static_cast<uint32_t>(seq.frames.size()));
    for (size_t f = 0; f < seq.frames.size(); ++f) {
        write_grid_record(os, seq.frames[f]);
        const Mat4& m = seq.poses[f].matrix();
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 4; ++c) write_f64(os, m(r, c));
    }
    if (!os) throw FormatError(FormatErrorCode::OpenFailed, str("writing ", path));
}

inline OccSequence read_sequence(const std::string& path) {
    auto is = open_in(path);
    expect_magic(is, "OCCS", 4, path);
    uint16_t ver = read_u16(is, "OCCS version");
    if (ver != detail::kOccFormatVersion)
        throw FormatError(FormatErrorCode::BadVersion,
                          str("OCCS version ", ver, ", expected ", detail::kOccFormatVersion));
    uint32_t count = read_u32(is, "OCCS frame count");
    OccSequence seq;
    seq.frames.reserve(count);
    seq.poses.reserve(count);
    for (uint32_t f = 0; f < count; ++f) {
        seq.frames.push_back(read_grid_record(is, path));
        Mat4 m;
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 4; ++c) m(r, c) = read_f64(is, "OCCS pose");
        try {
            seq.poses.emplace_back(m);
        } catch (const std::invalid_argument& e) {
            throw FormatError(FormatErrorCode::Corrupt, str("frame ", f, " pose: ", e.what()));
        }
    }
    return seq;
}

// ---------------------------------------------------------------------------
// OCCZ latent files
// ---------------------------------------------------------------------------

inline void write_latent(const std::string& path, int n_h, int n_w, int c,
                         const std::vector<float>& data) {
    if (data.size() != static_cast<size_t>(n_h) * n_w * c)
        throw std::invalid_argument("write_latent: payload size mismatch");
    auto os = open_out(path);
    os.write("OCCZ", 4);
    write_u16(os, detail::kOccFormatVersion);
    write_u32(os, static_cast<uint32_t>(n_h));
    write_u32(os, static_cast<uint32_t>(n_w));
    write_u32(os, static_cast<uint32_t>(c));
    for (float v : data) write_f32(os, v);
    if (!os) throw FormatError(FormatErrorCode::OpenFailed, str("writing ", path));
}

struct LatentFile {
    int n_h = 0, n_w = 0, c = 0;
    std::vector<float> data;
};

inline LatentFile read_latent(const std::string& path) {
    auto is = open_in(path);
    expect_magic(is, "OCCZ", 4, path);
    uint16_t ver = read_u16(is, "OCCZ version");
    if (ver != detail::kOccFormatVersion)
        throw FormatError(FormatErrorCode::BadVersion, str("OCCZ version ", ver));
    LatentFile lf;
    lf.n_h = static_cast<int>(read_u32(is, "OCCZ n_h"));
    lf.n_w = static_cast<int>(read_u32(is, "OCCZ n_w"));
    lf.c = static_cast<int>(read_u32(is, "OCCZ C"));
    if (lf.n_h < 1 || lf.n_w < 1 || lf.c < 1)
        throw FormatError(FormatErrorCode::Corrupt, "OCCZ dims");
    lf.data.resize(static_cast<size_t>(lf.n_h) * lf.n_w * lf.c);
    for (auto& v : lf.data) v = read_f32(is, "OCCZ payload");
    return lf;
}

}  // namespace dome

#endif  // DOME_OCCUPANCY_HPP
