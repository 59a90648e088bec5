#pragma once

#include "projforge/attack.hpp"
#include "projforge/autodiff.hpp"
#include "projforge/bundle.hpp"
#include "projforge/colormap.hpp"
#include "projforge/compositor.hpp"
#include "projforge/config.hpp"
#include "projforge/detector.hpp"
#include "projforge/diagnostics.hpp"
#include "projforge/error.hpp"
#include "projforge/eval.hpp"
#include "projforge/fixtures.hpp"
#include "projforge/image.hpp"
#include "projforge/image_io.hpp"
#include "projforge/optim.hpp"
#include "projforge/parallel.hpp"
#include "projforge/rng.hpp"
#include "projforge/synth.hpp"
#include "projforge/tps.hpp"
