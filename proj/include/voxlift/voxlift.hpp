#pragma once

// Umbrella header: multi-view RGB-D lifting, 3D token pooling, k-NN attention
// grounding decoder, and the objectives/metrics around them.

#include "voxlift/common.hpp"
#include "voxlift/decoder.hpp"
#include "voxlift/evalkit.hpp"
#include "voxlift/geometry.hpp"
#include "voxlift/io.hpp"
#include "voxlift/lift.hpp"
#include "voxlift/objective.hpp"
#include "voxlift/pipeline.hpp"
#include "voxlift/pooling.hpp"
#include "voxlift/scenegen.hpp"
#include "voxlift/spatial.hpp"
