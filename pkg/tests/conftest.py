from hypothesis import HealthCheck, settings

# property tests must behave identically run to run; exploration happens
# locally, not in the gate
settings.register_profile(
    "fedkdx",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("fedkdx")
