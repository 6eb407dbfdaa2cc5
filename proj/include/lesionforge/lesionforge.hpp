#pragma once

#include "lesionforge/adam.hpp"
#include "lesionforge/checkpoint.hpp"
#include "lesionforge/data.hpp"
#include "lesionforge/error.hpp"
#include "lesionforge/gan_zoo.hpp"
#include "lesionforge/image_io.hpp"
#include "lesionforge/laplacian.hpp"
#include "lesionforge/latent.hpp"
#include "lesionforge/layers.hpp"
#include "lesionforge/losses.hpp"
#include "lesionforge/network.hpp"
#include "lesionforge/parameter.hpp"
#include "lesionforge/random.hpp"
#include "lesionforge/rater.hpp"
#include "lesionforge/schedule.hpp"
#include "lesionforge/swd.hpp"
#include "lesionforge/tensor.hpp"
#include "lesionforge/trainer.hpp"
#include "lesionforge/vtt/study.hpp"
// last: httplib pulls in <resolv.h>
#include "lesionforge/vtt/server.hpp"
