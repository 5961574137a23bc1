#pragma once

// Umbrella header.

#include "v2gsim/attacks.hpp"
#include "v2gsim/bytes.hpp"
#include "v2gsim/codec.hpp"
#include "v2gsim/controllers.hpp"
#include "v2gsim/messages.hpp"
#include "v2gsim/netsim.hpp"
#include "v2gsim/scenario.hpp"
#include "v2gsim/securechannel.hpp"
#include "v2gsim/wire.hpp"
