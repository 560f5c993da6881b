#pragma once

// The gavatar command line. run() parses arguments, dispatches to a
// subcommand and maps failures to exit codes.

#include <cstdint>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "gavatar/cli_io.hpp"

namespace gavatar::cli {

enum ExitCode : int {
    kOk = 0,
    kFailure = 1,
    kUsage = 2,   // bad arguments, config or input files
    kAborted = 3, // training aborted; the last good checkpoint was written
    kEmpty = 4,   // empty result (no isosurface)
};

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

// Named starting configurations: "default" (full scale), "desk" (256
// primitives x 16 Gaussians, 256^2, photometric) and "tiny" (smoke tests).
io::AppConfig preset(std::string_view name);

render::Camera orbit_camera(const Vec3d& target, double radius, double azimuth_deg, double elevation_deg,
                            double fovy_deg, int width, int height);

// Cameras evenly spaced in azimuth, starting at azimuth_offset.
std::vector<render::Camera> orbit_cameras(const scene::Scene& scene, size_t count, double azimuth_offset,
                                          double elevation_deg, double radius, double fovy_deg, int width,
                                          int height);

// Pretrained scene with smooth procedural colors frozen into a baked bank;
// the target of self-reconstruction fits.
scene::Scene make_teacher(const io::AppConfig& config, const body::BodyModel& body);

struct BenchRow {
    size_t n = 0;
    int width = 0, height = 0;
    double ms_raster = 0.0;
    double ms_total = 0.0;
    double fps = 0.0;
    double ms_lbs = 0.0, ms_primitives = 0.0, ms_transform = 0.0;
};

struct BenchOptions {
    std::vector<size_t> counts{100'000, 200'000};
    std::vector<int> sizes{512};
    int repeats = 3;   // timed frames per row, median reported
    int warmup = 1;
    uint64_t seed = 0;
    int sh_coeffs = 1;
    bool large_row = true; // append N = 2.5M at 1024^2 if memory allows
};

// Resamples the scene to each count and times baked playback at the
// natural pose from the front.
std::vector<BenchRow> bench(const scene::Scene& scene, const BenchOptions& options, std::ostream* log = nullptr);
std::string bench_csv(const std::vector<BenchRow>& rows);

// Rough peak bytes of a bench row, and the memory currently available.
size_t bench_bytes(size_t n, int width, int height, int sh_coeffs);
size_t available_memory();

} // namespace gavatar::cli
