"""Hard-congestion crowd motion: microscopic disks and macroscopic densities."""
