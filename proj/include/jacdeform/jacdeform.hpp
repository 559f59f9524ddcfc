#pragma once

// Umbrella header.
#include "jacdeform/errors.hpp"
#include "jacdeform/mesh.hpp"
#include "jacdeform/sparse.hpp"
#include "jacdeform/gradient_operator.hpp"
#include "jacdeform/symmetry.hpp"
#include "jacdeform/jacobian_field.hpp"
#include "jacdeform/primitives.hpp"
#include "jacdeform/raster.hpp"
#include "jacdeform/image_io.hpp"
#include "jacdeform/objectives.hpp"
#include "jacdeform/optimizer.hpp"
#include "jacdeform/metrics.hpp"
#include "jacdeform/guidance_client.hpp"
