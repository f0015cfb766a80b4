#pragma once

// Everything except the remote scorer and the pipeline, which need cpp-httplib
// (link regrasp_remote and include vlm_remote.hpp or pipeline.hpp).

#include "regrasp/action.hpp"
#include "regrasp/candidate_refiner.hpp"
#include "regrasp/diffusion_policy.hpp"
#include "regrasp/error.hpp"
#include "regrasp/fixture_scorer.hpp"
#include "regrasp/geometry.hpp"
#include "regrasp/goal_composer.hpp"
#include "regrasp/hash.hpp"
#include "regrasp/image.hpp"
#include "regrasp/mask_geometry.hpp"
#include "regrasp/planar_sim.hpp"
#include "regrasp/policy_network.hpp"
#include "regrasp/scorer.hpp"
#include "regrasp/vlm_interface.hpp"
