import { defineConfig } from "vitest/config";

export default defineConfig({
    test: {
        environment: "happy-dom",
        include: ["tests/**/*.test.ts"],
        // The e2e test drives a real service process end to end.
        testTimeout: 120_000,
        hookTimeout: 60_000,
    },
});
