"""LIDAR SLAM engine: rasterization, ORB tracking, local mapping and loop closure."""
